use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default class inventory; index order defines class ids.
pub const DEFAULT_LABELS: [&str; 4] = ["angry", "sad", "neutral", "happy"];

/// Labels folded into another class at ingestion.
pub const LABEL_ALIASES: [(&str, &str); 1] = [("excited", "happy")];

pub fn default_labels() -> Vec<String> {
    DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<PathBuf>,
    pub transcript: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utt_embedding_id: Option<String>,
}

/// A validated manifest. Paths are resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub labels: Vec<String>,
    pub class_index: Vec<usize>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per label, in label order.
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self.labels.iter().map(|l| (l.clone(), 0)).collect();
        for r in &self.records {
            *counts.get_mut(&r.label).expect("validated label") += 1;
        }
        counts
    }
}

fn normalize_label(raw: &str) -> String {
    let l = raw.trim().to_lowercase();
    LABEL_ALIASES.iter().find(|(a, _)| *a == l).map_or(l, |(_, to)| to.to_string())
}

/// Parses JSON-lines text. `base` resolves relative audio/feature paths.
pub fn parse_manifest(text: &str, base: &Path, labels: &[String], source: &str) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut class_index = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = format!("{source}:{}", n + 1);
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::validation(format!("{at}: invalid JSON: {e}")))?;
        for field in ["id", "transcript", "label"] {
            if value.get(field).is_none_or(|v| v.is_null()) {
                return Err(Error::validation(format!("{at}: missing field `{field}`")));
            }
        }
        let mut rec: ManifestRecord =
            serde_json::from_value(value).map_err(|e| Error::validation(format!("{at}: {e}")))?;
        match (&rec.audio_path, &rec.features_path) {
            (Some(_), Some(_)) => {
                return Err(Error::validation(format!(
                    "{at}: record {} has both audio_path and features_path",
                    rec.id
                )))
            }
            (None, None) => {
                return Err(Error::validation(format!(
                    "{at}: record {} needs audio_path or features_path",
                    rec.id
                )))
            }
            _ => {}
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::validation(format!("{at}: duplicate id {}", rec.id)));
        }
        rec.label = normalize_label(&rec.label);
        let idx = labels.iter().position(|l| *l == rec.label).ok_or_else(|| {
            Error::validation(format!("{at}: unknown label {:?} (expected one of {})", rec.label, labels.join(", ")))
        })?;
        rec.audio_path = rec.audio_path.map(|p| base.join(p));
        rec.features_path = rec.features_path.map(|p| base.join(p));
        records.push(rec);
        class_index.push(idx);
    }
    if records.is_empty() {
        return Err(Error::validation(format!("{source}: no records")));
    }
    Ok(Manifest { records, labels: labels.to_vec(), class_index })
}

pub fn load_manifest(path: impl AsRef<Path>, labels: &[String]) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&text, base, labels, &path.display().to_string())?;
    log::info!("{}: {} records {:?}", path.display(), m.len(), m.class_counts());
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        parse_manifest(text, Path::new("/data"), &default_labels(), "m.jsonl")
    }

    #[test]
    fn parses_and_resolves_paths() {
        let m = parse(concat!(
            r#"{"id":"a","audio_path":"wav/a.wav","transcript":"hi","label":"sad","session":"Ses01"}"#,
            "\n\n",
            r#"{"id":"b","features_path":"/abs/b.mel","transcript":"yo","label":"Excited"}"#,
            "\n"
        ))
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[0].audio_path.as_deref(), Some(Path::new("/data/wav/a.wav")));
        assert_eq!(m.records[1].features_path.as_deref(), Some(Path::new("/abs/b.mel")));
        assert_eq!(m.records[1].label, "happy");
        assert_eq!(m.class_index, vec![1, 3]);
        assert_eq!(m.class_counts()["happy"], 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("", "no records"),
            (r#"{"id":"a","audio_path":"x","features_path":"y","transcript":"t","label":"sad"}"#, "both"),
            (r#"{"id":"a","audio_path":"x","transcript":"t","label":"bored"}"#, "unknown label"),
            (r#"{"id":"a","audio_path":"x","label":"sad"}"#, "transcript"),
            (r#"{"id":"a","transcript":"t","label":"sad"}"#, "audio_path or features_path"),
        ];
        for (text, needle) in cases {
            let err = parse(text).unwrap_err();
            assert!(matches!(err, Error::Validation(_)));
            assert!(err.to_string().contains(needle), "{err}");
        }
        let dup = concat!(
            r#"{"id":"a","audio_path":"x","transcript":"t","label":"sad"}"#,
            "\n",
            r#"{"id":"a","audio_path":"y","transcript":"t","label":"sad"}"#
        );
        let err = parse(dup).unwrap_err().to_string();
        assert!(err.contains("m.jsonl:2") && err.contains("duplicate id a"), "{err}");
    }
}
