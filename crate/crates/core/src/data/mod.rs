//! Manifests, the synthetic corpus, and conversion of records into model inputs.

pub mod dataset;
pub mod manifest;
pub mod synthetic;

pub use dataset::{featurize, load_mel, tokenize_all, ExampleBuilder, FeaturizeStats, TextResources, WordVocab};
pub use manifest::{default_labels, load_manifest, parse_manifest, Manifest, ManifestRecord, DEFAULT_LABELS};
pub use synthetic::{gen_synthetic, generate, SyntheticSpec};
