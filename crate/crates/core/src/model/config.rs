use serde::{Deserialize, Serialize};

use crate::audio::N_MELS;
use crate::error::{Error, Result};
use crate::nn::{CrossBlock, EncoderBlock, Linear};
use crate::text::{PHONEME_VOCAB, WORD_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    Concat,
    Highway,
}

/// Every architectural hyperparameter of the multilevel model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers_text: usize,
    pub layers_cross: usize,
    pub layers_fusion: usize,
    pub combine_mode: CombineMode,
    pub num_classes: usize,
    pub dropout: f64,
    pub ff_dim: usize,
    pub mel_dim: usize,
    pub mel_prenet_hidden: usize,
    pub word_dim: usize,
    pub phoneme_dim: usize,
    pub phoneme_channels: usize,
    pub phoneme_kernel_widths: Vec<usize>,
    pub prenet_layers: usize,
    pub prenet_kernel: usize,
    pub highway_layers: usize,
    pub highway_gate_bias: f64,
    /// Rows of a trainable word table; 0 keeps word vectors frozen.
    pub word_table_rows: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            layers_text: 1,
            layers_cross: 1,
            layers_fusion: 2,
            combine_mode: CombineMode::Highway,
            num_classes: 4,
            dropout: 0.1,
            ff_dim: 512,
            mel_dim: N_MELS,
            mel_prenet_hidden: 256,
            word_dim: WORD_DIM,
            phoneme_dim: 64,
            phoneme_channels: 150,
            phoneme_kernel_widths: vec![2, 3, 4],
            prenet_layers: 3,
            prenet_kernel: 5,
            highway_layers: 2,
            highway_gate_bias: -1.0,
            word_table_rows: 0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for fast verification runs.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            heads: 2,
            ff_dim: 24,
            mel_prenet_hidden: 12,
            phoneme_dim: 6,
            phoneme_channels: 9,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.layers_text == 0 || self.layers_cross == 0 || self.layers_fusion == 0 {
            return bad("all transformer layer counts must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let widths = &self.phoneme_kernel_widths;
        if widths.is_empty() || widths.contains(&0) || !self.phoneme_channels.is_multiple_of(widths.len()) {
            return bad(format!(
                "phoneme_channels {} must split evenly over kernel widths {widths:?}",
                self.phoneme_channels
            ));
        }
        if self.prenet_layers == 0 || self.prenet_kernel == 0 {
            return bad("encoder pre-net needs at least one layer of positive width".into());
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("ff_dim", self.ff_dim),
            ("mel_dim", self.mel_dim),
            ("mel_prenet_hidden", self.mel_prenet_hidden),
            ("word_dim", self.word_dim),
            ("phoneme_dim", self.phoneme_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the concatenated word + phoneme vector.
    pub fn combined_dim(&self) -> usize {
        self.word_dim + self.phoneme_channels
    }

    /// Parameters of everything up to and including the deep fusion stack.
    pub fn encoder_params(&self) -> usize {
        let d = self.d_model;
        let u = self.combined_dim();
        let per_width = self.phoneme_channels / self.phoneme_kernel_widths.len();
        let phoneme = PHONEME_VOCAB * self.phoneme_dim
            + self.phoneme_kernel_widths.iter().map(|w| w * self.phoneme_dim * per_width).sum::<usize>();
        let highway = match self.combine_mode {
            CombineMode::Concat => 0,
            CombineMode::Highway => self.highway_layers * 2 * Linear::num_params(u, u),
        };
        let k = self.prenet_kernel;
        let prenet = (k * u * d + d + 2 * d)
            + (self.prenet_layers - 1) * (k * d * d + d + 2 * d)
            + Linear::num_params(d, d);
        let mel = Linear::num_params(self.mel_dim, self.mel_prenet_hidden) + Linear::num_params(self.mel_prenet_hidden, d);
        let blocks = (self.layers_text + self.layers_fusion) * EncoderBlock::num_params(d, self.ff_dim)
            + self.layers_cross * CrossBlock::num_params(d, self.ff_dim);
        let words = self.word_table_rows * self.word_dim;
        phoneme + highway + prenet + mel + blocks + words
    }

    /// Total parameter count of the multilevel classifier.
    pub fn num_params(&self) -> usize {
        self.encoder_params() + Linear::num_params(self.d_model, self.num_classes)
    }
}

