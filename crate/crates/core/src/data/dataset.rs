use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::{features_from_samples, parse_wav, read_features, write_features, MelMatrix};
use crate::data::manifest::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::fusion::EmbeddingTable;
use crate::model::{ModelConfig, ModelInput};
use crate::tensor::Tensor;
use crate::text::{tokenize_and_g2p, Lexicon, TokenSeq, WordVectors};
use crate::train::Example;

/// Lexicon and word vectors shared by every utterance.
#[derive(Clone, Debug)]
pub struct TextResources {
    pub lexicon: Lexicon,
    pub vectors: WordVectors,
}

/// Sorted vocabulary of the words in a manifest; row `len()` is UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVocab {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let words: Vec<String> = words.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        WordVocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Rows of a trainable table: vocabulary plus UNK.
    pub fn table_rows(&self) -> usize {
        self.words.len() + 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.words.len())
    }

    /// Initial table values taken from `vectors`; UNK gets the mean row.
    pub fn initial_table(&self, vectors: &WordVectors) -> Result<Tensor> {
        let dim = vectors.dim();
        let mut data: Vec<f64> = self.words.iter().flat_map(|w| vectors.vector(w)).collect();
        let n = self.words.len().max(1) as f64;
        let unk: Vec<f64> = (0..dim).map(|j| data.iter().skip(j).step_by(dim).sum::<f64>() / n).collect();
        data.extend(unk);
        Tensor::new(vec![self.table_rows(), dim], data)
    }
}

/// Tokenizes every transcript of the manifest.
pub fn tokenize_all(manifest: &Manifest, lexicon: &Lexicon) -> Result<Vec<TokenSeq>> {
    manifest
        .records
        .iter()
        .map(|r| tokenize_and_g2p(&r.transcript, lexicon).map_err(|e| Error::validation(format!("record {}: {e}", r.id))))
        .collect()
}

fn content_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..16])
}

/// Cache file for a WAV file's features, keyed by the audio bytes.
pub fn cache_path(cache: &Path, wav_bytes: &[u8]) -> PathBuf {
    cache.join(format!("{}.mel", content_hash(wav_bytes)))
}

/// Loads features for one record. With a cache directory, WAV features are
/// read from (or written to) the cache. Returns the features and whether a
/// cache file was written.
pub fn load_mel(record: &ManifestRecord, cache: Option<&Path>) -> Result<(MelMatrix, bool)> {
    if let Some(p) = &record.features_path {
        return Ok((read_features(p)?, false));
    }
    let path = record.audio_path.as_ref().ok_or_else(|| Error::validation(format!("record {} has no audio", record.id)))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let compute = || -> Result<MelMatrix> {
        let audio = parse_wav(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })?;
        features_from_samples(&audio.samples, audio.sample_rate)
    };
    match cache {
        None => Ok((compute()?, false)),
        Some(dir) => {
            let cached = cache_path(dir, &bytes);
            if cached.exists() {
                if let Ok(m) = read_features(&cached) {
                    return Ok((m, false));
                }
            }
            let mel = compute()?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_features(&cached, &mel)?;
            Ok((read_features(&cached)?, true))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FeaturizeStats {
    pub written: usize,
    pub reused: usize,
}

/// Fills the feature cache for every audio record.
pub fn featurize(manifest: &Manifest, cache: &Path) -> Result<FeaturizeStats> {
    let mut stats = FeaturizeStats::default();
    for r in manifest.records.iter().filter(|r| r.audio_path.is_some()) {
        let (_, wrote) = load_mel(r, Some(cache))?;
        if wrote {
            stats.written += 1;
        } else {
            stats.reused += 1;
        }
    }
    Ok(stats)
}

/// Everything needed to turn manifest records into model inputs.
pub struct ExampleBuilder<'a> {
    pub text: &'a TextResources,
    pub cfg: &'a ModelConfig,
    pub vocab: Option<&'a WordVocab>,
    pub embeddings: Option<&'a EmbeddingTable>,
    pub cache: Option<&'a Path>,
}

impl ExampleBuilder<'_> {
    pub fn build(&self, manifest: &Manifest) -> Result<Vec<Example>> {
        if self.text.vectors.dim() != self.cfg.word_dim {
            return Err(Error::validation(format!(
                "word vectors have {} dims, model expects {}",
                self.text.vectors.dim(),
                self.cfg.word_dim
            )));
        }
        if let Some(table) = self.embeddings {
            table.require(manifest.records.iter().map(|r| r.utt_embedding_id.as_deref().unwrap_or(&r.id)))?;
        }
        let tokens = tokenize_all(manifest, &self.text.lexicon)?;
        manifest
            .records
            .iter()
            .zip(&manifest.class_index)
            .zip(tokens)
            .map(|((r, &label), tok)| {
                let (mel, _) = load_mel(r, self.cache)?;
                self.example(r, label, mel, &tok)
            })
            .collect()
    }

    /// Input for one transcript and feature matrix.
    pub fn input(&self, mel: MelMatrix, tok: &TokenSeq) -> Result<ModelInput> {
        if mel.frames.cols() != self.cfg.mel_dim {
            return Err(Error::dim(format!("features have {} channels, model expects {}", mel.frames.cols(), self.cfg.mel_dim)));
        }
        let dim = self.cfg.word_dim;
        let vecs: Vec<f64> = tok.words.iter().flat_map(|w| self.text.vectors.vector(w)).collect();
        let word_ids = self.vocab.map_or_else(Vec::new, |v| tok.words.iter().map(|w| v.id(w)).collect());
        Ok(ModelInput::new(mel.frames, Tensor::new(vec![tok.len(), dim], vecs)?, word_ids, tok.phonemes.clone()))
    }

    fn example(&self, r: &ManifestRecord, label: usize, mel: MelMatrix, tok: &TokenSeq) -> Result<Example> {
        let mut input = self.input(mel, tok)?;
        if let Some(table) = self.embeddings {
            let key = r.utt_embedding_id.as_deref().unwrap_or(&r.id);
            input.utt_emb = table.get(key).map(|e| e.vector.clone());
        }
        Ok(Example { id: r.id.clone(), label, input, session: r.session.clone(), speaker: r.speaker.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;
    use crate::data::synthetic::{gen_synthetic, SyntheticSpec};
    use crate::fusion::parse_utterance_embeddings;

    fn corpus(dir: &Path) -> Manifest {
        let spec = SyntheticSpec { per_class: 2, classes: 2, ..SyntheticSpec::default() };
        load_manifest(gen_synthetic(&spec, dir).unwrap(), &spec.labels()).unwrap()
    }

    #[test]
    fn featurize_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let cache = dir.path().join("cache");
        assert_eq!(featurize(&m, &cache).unwrap(), FeaturizeStats { written: 4, reused: 0 });
        let stamp: Vec<_> = std::fs::read_dir(&cache)
            .unwrap()
            .map(|e| e.unwrap().metadata().unwrap().modified().unwrap())
            .collect();
        assert_eq!(featurize(&m, &cache).unwrap(), FeaturizeStats { written: 0, reused: 4 });
        let again: Vec<_> = std::fs::read_dir(&cache)
            .unwrap()
            .map(|e| e.unwrap().metadata().unwrap().modified().unwrap())
            .collect();
        assert_eq!(stamp, again);
    }

    #[test]
    fn builds_examples_with_vocab_and_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let m = corpus(dir.path());
        let text = TextResources { lexicon: Lexicon::new(), vectors: WordVectors::hashed(300, 1) };
        let tokens = tokenize_all(&m, &text.lexicon).unwrap();
        let vocab = WordVocab::new(tokens.iter().flat_map(|t| t.words.clone()));
        let mut emb = String::from("UEMB 3\n");
        for r in &m.records {
            emb.push_str(&format!("{} 1 2 3\n", r.id));
        }
        let table = parse_utterance_embeddings(&emb, "e").unwrap();
        let cfg = ModelConfig::default();
        let b = ExampleBuilder { text: &text, cfg: &cfg, vocab: Some(&vocab), embeddings: Some(&table), cache: None };
        let ex = b.build(&m).unwrap();
        assert_eq!(ex.len(), 4);
        for e in &ex {
            assert_eq!(e.input.mel.cols(), 128);
            assert!(e.input.mel.row(0).iter().all(|&v| v == 0.0));
            assert_eq!(e.input.word_ids.len(), e.input.num_words());
            assert!(e.input.word_ids.iter().all(|&i| i < vocab.len()));
            assert_eq!(e.input.utt_emb.as_ref().unwrap().data(), &[1.0, 2.0, 3.0]);
        }
        let partial = parse_utterance_embeddings("UEMB 3\n", "e").unwrap();
        let b = ExampleBuilder { embeddings: Some(&partial), ..b };
        let err = b.build(&m).unwrap_err().to_string();
        assert!(err.contains("4 utterance id(s)"), "{err}");
    }

    #[test]
    fn vocab_table_rows_follow_vectors() {
        let v = WordVocab::new(["b".to_string(), "a".to_string(), "b".to_string()]);
        assert_eq!(v.words, vec!["a", "b"]);
        assert_eq!(v.id("zzz"), 2);
        let vectors = WordVectors::parse("a 1 2\nb 3 4\n", 2, "v").unwrap();
        let t = v.initial_table(&vectors).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 3.0]);
    }
}
