use crate::error::{Error, Result};
use crate::nn::params::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Padding, Tensor, Var};

/// `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in_uniform(&[d_in, d_out], d_in));
        let bias = Some(store.add(format!("{name}.bias"), init.fan_in_uniform(&[d_out], d_in)));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn with_bias_value(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in_uniform(&[d_in, d_out], d_in));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::full([d_out], bias)));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let y = cx.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.param(b);
                cx.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.param(self.gain);
        let b = cx.param(self.bias);
        cx.g.layer_norm(x, g, b, self.eps)
    }
}

/// Bias-free or biased 1-D convolution over time with `[W×Cin×Cout]` kernels.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = width * c_in;
        let kernel = store.add(format!("{name}.kernel"), init.fan_in_uniform(&[width, c_in, c_out], fan_in));
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), init.fan_in_uniform(&[c_out], fan_in)));
        Conv1d { kernel, bias, padding: Padding::Same }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let k = cx.param(self.kernel);
        let y = cx.g.conv1d(x, k, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = cx.param(b);
                cx.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Multi-head scaled dot-product attention with a key padding mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Attention output and the per-head weight matrices `[Tq × Tk]`.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_model: usize, heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.query"), d_model, d_model),
            key: Linear::new(store, init, &format!("{name}.key"), d_model, d_model),
            value: Linear::new(store, init, &format!("{name}.value"), d_model, d_model),
            out: Linear::new(store, init, &format!("{name}.out"), d_model, d_model),
            heads,
        }
    }

    /// `queries: [Tq×D]` attend over `memory: [Tk×D]`; keys with
    /// `key_keep[j] == false` get zero weight.
    pub fn forward(&self, cx: &mut Ctx, queries: Var, memory: Var, key_keep: Option<&[bool]>) -> Result<Attended> {
        let d = self.query.d_out;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(cx, queries)?;
        let k = self.key.forward(cx, memory)?;
        let v = self.value.forward(cx, memory)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.g.slice_cols(q, h * dh, dh)?;
            let kh = cx.g.slice_cols(k, h * dh, dh)?;
            let vh = cx.g.slice_cols(v, h * dh, dh)?;
            let scores = cx.g.matmul_t(qh, kh)?;
            let scores = cx.g.scale(scores, scale);
            let p = cx.g.masked_softmax(scores, key_keep)?;
            weights.push(p);
            let p = cx.dropout(p)?;
            heads.push(cx.g.matmul(p, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { cx.g.concat_cols(&heads)? };
        let output = self.out.forward(cx, joined)?;
        Ok(Attended { output, weights })
    }

    pub fn num_params(d: usize) -> usize {
        4 * Linear::num_params(d, d)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, init, &format!("{name}.inner"), d, hidden),
            outer: Linear::new(store, init, &format!("{name}.outer"), hidden, d),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(cx, x)?;
        let h = cx.g.relu(h);
        self.outer.forward(cx, h)
    }

    pub fn num_params(d: usize, hidden: usize) -> usize {
        Linear::num_params(d, hidden) + Linear::num_params(hidden, d)
    }
}

fn residual_norm(cx: &mut Ctx, x: Var, sub: Var, ln: &LayerNorm) -> Result<Var> {
    let sub = cx.dropout(sub)?;
    let s = cx.g.add(x, sub)?;
    ln.forward(cx, s)
}

/// Post-norm transformer encoder block: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize, ff: usize) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d, heads),
            attn_norm: LayerNorm::new(store, &format!("{name}.self_attn_norm"), d),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d, ff),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, keep: Option<&[bool]>, attn_log: &mut Vec<Var>) -> Result<Var> {
        let a = self.attn.forward(cx, x, x, keep)?;
        attn_log.extend(a.weights);
        let x = residual_norm(cx, x, a.output, &self.attn_norm)?;
        let f = self.ff.forward(cx, x)?;
        residual_norm(cx, x, f, &self.ff_norm)
    }

    pub fn num_params(d: usize, ff: usize) -> usize {
        MultiHeadAttention::num_params(d) + FeedForward::num_params(d, ff) + 4 * d
    }
}

/// Decoder-style block without a causal mask: bidirectional self-attention,
/// attention from this stream into a memory stream, then feed-forward.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ff: FeedForward,
    pub ff_norm: LayerNorm,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize, ff: usize) -> Self {
        CrossBlock {
            self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), d, heads),
            self_norm: LayerNorm::new(store, &format!("{name}.self_attn_norm"), d),
            cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross_attn"), d, heads),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_attn_norm"), d),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d, ff),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        cx: &mut Ctx,
        x: Var,
        keep: Option<&[bool]>,
        memory: Var,
        memory_keep: Option<&[bool]>,
        self_log: &mut Vec<Var>,
        cross_log: &mut Vec<Var>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(cx, x, x, keep)?;
        self_log.extend(a.weights);
        let x = residual_norm(cx, x, a.output, &self.self_norm)?;
        let c = self.cross_attn.forward(cx, x, memory, memory_keep)?;
        cross_log.extend(c.weights);
        let x = residual_norm(cx, x, c.output, &self.cross_norm)?;
        let f = self.ff.forward(cx, x)?;
        residual_norm(cx, x, f, &self.ff_norm)
    }

    pub fn num_params(d: usize, ff: usize) -> usize {
        2 * MultiHeadAttention::num_params(d) + FeedForward::num_params(d, ff) + 6 * d
    }
}

/// Sinusoidal position table `[len × d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape and data agree")
}

/// Adds sinusoidal positions to `x: [T×D]`.
pub fn add_positions(cx: &mut Ctx, x: Var) -> Result<Var> {
    let (t, d) = cx.g.value(x).matrix_dims()?;
    let pe = cx.g.constant(sinusoidal_positions(t, d));
    cx.g.add(x, pe)
}

pub fn check_mask(len: usize, keep: Option<&[bool]>, what: &str) -> Result<()> {
    match keep {
        Some(k) if k.len() != len => Err(Error::dim(format!(
            "{what}: mask has {} entries for sequence of {len}",
            k.len()
        ))),
        _ => Ok(()),
    }
}
