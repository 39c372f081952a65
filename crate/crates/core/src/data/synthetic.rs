//! Deterministic toy corpus: class `k` is a tone at `200·(k+1)` Hz with
//! a little noise and a class-specific sentence.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::write_wav;
use crate::data::manifest::{ManifestRecord, DEFAULT_LABELS};
use crate::error::{Error, Result};

pub const SESSIONS: usize = 5;

const TEMPLATES: [[&str; 3]; 4] = [
    ["i am furious about this", "stop shouting at me now", "this makes me so mad"],
    ["i miss her so much", "everything feels gray today", "i cannot stop crying"],
    ["the meeting starts at noon", "please pass the salt", "the train leaves at five"],
    ["what a wonderful surprise", "we won the big game", "i love this sunny day"],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub sample_rate: u32,
    pub min_secs: f64,
    pub max_secs: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 4, per_class: 40, sample_rate: 16000, min_secs: 0.3, max_secs: 0.45, noise: 0.05, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=DEFAULT_LABELS.len()).contains(&self.classes) {
            return Err(Error::validation(format!("classes must be 2..=4, got {}", self.classes)));
        }
        if self.per_class == 0 {
            return Err(Error::validation("per_class must be positive"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if tone_hz(self.classes - 1) >= nyquist {
            return Err(Error::validation(format!("sample rate {} too low for the top tone", self.sample_rate)));
        }
        if !(self.min_secs >= 0.05 && self.max_secs >= self.min_secs) {
            return Err(Error::validation("need 0.05 <= min_secs <= max_secs"));
        }
        if !(self.noise >= 0.0 && self.noise < 1.0) {
            return Err(Error::validation("noise must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        DEFAULT_LABELS[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

pub fn tone_hz(class: usize) -> f64 {
    200.0 * (class + 1) as f64
}

/// One generated utterance before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticUtterance {
    pub record: ManifestRecord,
    pub class: usize,
    pub pcm: Vec<i16>,
}

/// Generates the corpus in memory. Utterance `j` of every class goes to
/// session `j mod 5`, so sessions are class-balanced.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticUtterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let labels = spec.labels();
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for j in 0..spec.per_class {
        for (k, label) in labels.iter().enumerate() {
            let secs = rng.gen_range(spec.min_secs..=spec.max_secs);
            let n = (secs * spec.sample_rate as f64).round() as usize;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.4..0.6);
            let w = std::f64::consts::TAU * tone_hz(k) / spec.sample_rate as f64;
            let pcm = (0..n)
                .map(|t| {
                    let x = amp * (w * t as f64 + phase).sin() + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (x.clamp(-1.0, 1.0) * 32767.0).round() as i16
                })
                .collect();
            let session = j % SESSIONS + 1;
            let id = format!("{label}_{j:04}");
            let transcript = TEMPLATES[k][rng.gen_range(0..TEMPLATES[k].len())].to_string();
            let record = ManifestRecord {
                id: id.clone(),
                audio_path: Some(PathBuf::from(format!("wav/{id}.wav"))),
                features_path: None,
                transcript,
                label: label.clone(),
                session: Some(format!("Ses{session:02}")),
                speaker: Some(format!("Ses{session:02}{}", if j % 2 == 0 { 'F' } else { 'M' })),
                utt_embedding_id: None,
            };
            out.push(SyntheticUtterance { record, class: k, pcm });
        }
    }
    Ok(out)
}

/// Writes `wav/*.wav` and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let utts = generate(spec)?;
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut lines = Vec::new();
    for u in &utts {
        let rel = u.record.audio_path.as_ref().expect("synthetic records carry audio");
        write_wav(dir.join(rel), &u.pcm, 1, spec.sample_rate)?;
        serde_json::to_writer(&mut lines, &u.record)?;
        lines.push(b'\n');
    }
    let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
