//! Text branch ahead of the text encoder: phoneme CNN, word/phoneme
//! combination, and the convolutional encoder pre-net.

use crate::error::{Error, Result};
use crate::model::config::{CombineMode, ModelConfig};
use crate::nn::{Conv1d, Ctx, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::text::{PAD_ID, PHONEME_VOCAB};

/// Per-word phoneme embedding: lookup, parallel same-padded convolutions of
/// different widths, ReLU, max over the word, concatenation.
#[derive(Clone, Debug)]
pub struct PhonemeCnn {
    pub table: ParamId,
    pub convs: Vec<Conv1d>,
    pub widths: Vec<usize>,
}

impl PhonemeCnn {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let table = store.add(format!("{name}.table"), init.normal(&[PHONEME_VOCAB, cfg.phoneme_dim], 1.0));
        let per = cfg.phoneme_channels / cfg.phoneme_kernel_widths.len();
        let convs = cfg
            .phoneme_kernel_widths
            .iter()
            .map(|&w| Conv1d::new(store, init, &format!("{name}.conv{w}"), w, cfg.phoneme_dim, per, false))
            .collect();
        PhonemeCnn { table, convs, widths: cfg.phoneme_kernel_widths.clone() }
    }

    /// Embeds each word, giving `[words × channels]`.
    ///
    /// Words are packed into one sequence separated by zero rows at least as
    /// long as the widest kernel's reach, so the packed convolution equals
    /// per-word same-padded convolutions. Trailing PAD ids are not part of a
    /// word's pooling segment.
    pub fn forward_words(&self, cx: &mut Ctx, words: &[Vec<u32>]) -> Result<Var> {
        let gap = self.widths.iter().max().copied().unwrap_or(1).saturating_sub(1);
        let mut ids: Vec<Option<usize>> = Vec::new();
        let mut segments = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let len = w.iter().rposition(|&p| p != PAD_ID).map_or(0, |p| p + 1);
            if len == 0 {
                return Err(Error::validation(format!("word {i} has no phonemes")));
            }
            if i > 0 {
                ids.extend(std::iter::repeat_n(None, gap));
            }
            segments.push((ids.len(), len));
            ids.extend(w[..len].iter().map(|&p| (p != PAD_ID).then_some(p as usize)));
        }
        let table = cx.param(self.table);
        let x = cx.g.gather(table, &ids)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let y = conv.forward(cx, x)?;
            let y = cx.g.relu(y);
            pooled.push(cx.g.segment_max(y, &segments)?);
        }
        cx.g.concat_cols(&pooled)
    }

    /// Fixed-size embedding of a single word, `[channels]`.
    pub fn embed_word(&self, cx: &mut Ctx, phonemes: &[u32]) -> Result<Var> {
        let y = self.forward_words(cx, &[phonemes.to_vec()])?;
        let c = cx.g.value(y).cols();
        cx.g.reshape(y, vec![c])
    }
}

/// Stack of highway layers `Z = H(u)·T(u) + u·(1 − T(u))` with
/// `H = ReLU(affine)` and `T = sigmoid(affine)`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub layers: Vec<(Linear, Linear)>,
}

impl Highway {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, layers: usize, gate_bias: f64) -> Self {
        let layers = (0..layers)
            .map(|i| {
                let h = Linear::new(store, init, &format!("{name}.{i}.transform"), dim, dim);
                let t = Linear::with_bias_value(store, init, &format!("{name}.{i}.gate"), dim, dim, gate_bias);
                (h, t)
            })
            .collect();
        Highway { layers }
    }

    pub fn forward(&self, cx: &mut Ctx, u: Var) -> Result<Var> {
        let mut u = u;
        for (h, t) in &self.layers {
            let hu = h.forward(cx, u)?;
            let hu = cx.g.relu(hu);
            let tu = t.forward(cx, u)?;
            let tu = cx.g.sigmoid(tu);
            u = highway_mix(cx, hu, tu, u)?;
        }
        Ok(u)
    }
}

/// `h·t + u·(1 − t)` elementwise.
pub fn highway_mix(cx: &mut Ctx, h: Var, t: Var, u: Var) -> Result<Var> {
    let carry = cx.g.affine_scalar(t, -1.0, 1.0);
    let a = cx.g.mul(h, t)?;
    let b = cx.g.mul(u, carry)?;
    cx.g.add(a, b)
}

/// Concatenates word and phoneme vectors and, in highway mode, passes them
/// through the highway stack.
pub fn combine(cx: &mut Ctx, words: Var, phonemes: Var, mode: CombineMode, highway: Option<&Highway>) -> Result<Var> {
    let u = cx.g.concat_cols(&[words, phonemes])?;
    match (mode, highway) {
        (CombineMode::Concat, _) => Ok(u),
        (CombineMode::Highway, Some(hw)) => hw.forward(cx, u),
        (CombineMode::Highway, None) => Err(Error::Contract("highway mode without highway layers".into())),
    }
}

/// Same-padded conv → ReLU → layer norm, repeated, then a linear projection.
#[derive(Clone, Debug)]
pub struct EncoderPrenet {
    pub convs: Vec<(Conv1d, LayerNorm)>,
    pub projection: Linear,
}

impl EncoderPrenet {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let convs = (0..cfg.prenet_layers)
            .map(|i| {
                let c_in = if i == 0 { cfg.combined_dim() } else { d };
                let conv = Conv1d::new(store, init, &format!("{name}.conv{i}"), cfg.prenet_kernel, c_in, d, true);
                (conv, LayerNorm::new(store, &format!("{name}.norm{i}"), d))
            })
            .collect();
        let projection = Linear::new(store, init, &format!("{name}.projection"), d, d);
        EncoderPrenet { convs, projection }
    }

    /// `seq: [T×U]` → `[T×D]`. Rows whose `keep` entry is false are zeroed
    /// after every convolution layer so they act as zero padding.
    pub fn forward(&self, cx: &mut Ctx, seq: Var, keep: Option<&[f64]>) -> Result<Var> {
        let mut x = seq;
        for (conv, norm) in &self.convs {
            x = conv.forward(cx, x)?;
            x = cx.g.relu(x);
            x = norm.forward(cx, x)?;
            if let Some(k) = keep {
                x = cx.g.row_scale(x, k)?;
            }
        }
        self.projection.forward(cx, x)
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct MelPrenet {
    pub first: Linear,
    pub second: Linear,
}

impl MelPrenet {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        MelPrenet {
            first: Linear::new(store, init, &format!("{name}.fc0"), cfg.mel_dim, cfg.mel_prenet_hidden),
            second: Linear::new(store, init, &format!("{name}.fc1"), cfg.mel_prenet_hidden, cfg.d_model),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, mel: Var) -> Result<Var> {
        let h = self.first.forward(cx, mel)?;
        let h = cx.g.relu(h);
        self.second.forward(cx, h)
    }
}

pub fn zeros_like_rows(cx: &mut Ctx, rows: usize, cols: usize) -> Var {
    cx.g.constant(Tensor::zeros([rows, cols]))
}
