//! The JSON run configuration: model, training, fusion and data settings in
//! one document. Every section and field is optional; missing values take
//! their defaults. Relative paths are resolved against the directory of the
//! config file, so a loaded config holds absolute paths.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::default_labels;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Multilevel,
    Multigranularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Text word vectors; without a file, deterministic hashed vectors are used.
    pub word_vectors: Option<PathBuf>,
    pub hashed_vectors_seed: u64,
    pub utt_embeddings: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
    pub labels: Vec<String>,
    /// Learn a word table initialised from the word vectors.
    pub fine_tune_words: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            lexicon: None,
            word_vectors: None,
            hashed_vectors_seed: 0,
            utt_embeddings: None,
            feature_cache: None,
            labels: default_labels(),
            fine_tune_words: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
    /// Multilevel checkpoint whose encoder initialises a fusion model.
    pub fine_checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path, source: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::format(source, e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::ConfigNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let full = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        let base = full.parent().unwrap_or(Path::new("/"));
        Self::parse(&text, base, &path.display().to_string())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let d = &mut self.data;
        for p in [&mut d.manifest, &mut d.lexicon, &mut d.word_vectors, &mut d.utt_embeddings, &mut d.feature_cache] {
            fix(p);
        }
        fix(&mut self.fine_checkpoint);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.labels.len() != self.model.num_classes {
            return Err(Error::validation(format!(
                "{} labels configured but model has {} classes",
                self.data.labels.len(),
                self.model.num_classes
            )));
        }
        if self.fine_checkpoint.is_some() && self.kind != ModelKind::Multigranularity {
            return Err(Error::validation("fine_checkpoint applies to multigranularity runs only"));
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let c = RunConfig::parse("{}", Path::new("/x"), "c").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.seeds, vec![1, 2, 3]);
        assert_eq!(c.data.labels, vec!["angry", "sad", "neutral", "happy"]);
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.model.layers_fusion = 3;
        c.kind = ModelKind::Multigranularity;
        c.data.manifest = Some("/abs/m.jsonl".into());
        let back = RunConfig::parse(&c.to_json().unwrap(), Path::new("/elsewhere"), "c").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let c = RunConfig::parse(r#"{"data": {"manifest": "m.jsonl"}}"#, Path::new("/runs/a"), "c").unwrap();
        assert_eq!(c.data.manifest.unwrap(), Path::new("/runs/a/m.jsonl"));
    }

    #[test]
    fn errors() {
        assert!(matches!(RunConfig::load("/no/such/config.json"), Err(Error::ConfigNotFound(_))));
        assert!(matches!(
            RunConfig::parse(r#"{"model": {"d_modle": 3}}"#, Path::new(""), "c"),
            Err(Error::Format { .. })
        ));
        let mut c = RunConfig::default();
        c.data.labels.pop();
        assert!(c.validate().is_err());
    }
}
