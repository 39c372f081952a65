//! Multilevel audio + text transformer for utterance emotion classification,
//! with the supporting autodiff engine, feature pipelines, late fusion with
//! utterance embeddings, and a cross-validation harness.

pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
