//! Self-checks shared by the `gradcheck` command and the acceptance tests.
//! Each check reports a measured value and the bound it must stay within.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::mel::{frame_signal, hop_len, window_len};
use crate::error::Result;
use crate::fusion::{FusionConfig, MultiGranularityModel, UttSource};
use crate::model::checkpoint;
use crate::model::frontend::Highway;
use crate::model::{param_gradcheck, Classifier, CombineMode, ModelConfig, ModelInput, MultilevelModel};
use crate::nn::{Ctx, Init, ParamStore};
use crate::tensor::{op_suite, Graph, Tensor};
use crate::train::{pad_batch, Adam, AdamConfig, ConfusionMatrix};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value < bound`.
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, passed: value < bound }
    }

    /// Passes when `value <= bound`; used for exact (zero) bounds.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, passed: value <= bound }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:.3e} (bound {:.0e})", self.name, self.value, self.bound)
    }
}

/// Small configuration for finite-difference checks of whole models.
pub fn check_config() -> ModelConfig {
    ModelConfig { word_dim: 12, mel_dim: 10, word_table_rows: 5, ..ModelConfig::tiny() }
}

/// Random utterance: dummy zero first frame, `words` words of 1–5 phonemes,
/// word ids below `cfg.word_table_rows` (or 0), optional utterance vector.
pub fn random_input(cfg: &ModelConfig, frames: usize, words: usize, utt_dim: Option<usize>, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mel: Vec<f64> = (0..frames * cfg.mel_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    mel[..cfg.mel_dim].iter_mut().for_each(|x| *x = 0.0);
    let vecs = (0..words * cfg.word_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let phonemes = (0..words).map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(2..41)).collect()).collect();
    let ids = (0..words).map(|_| rng.gen_range(0..cfg.word_table_rows.max(1))).collect();
    let mut x = ModelInput::new(
        Tensor::new(vec![frames, cfg.mel_dim], mel).expect("mel shape"),
        Tensor::new(vec![words, cfg.word_dim], vecs).expect("word shape"),
        ids,
        phonemes,
    );
    x.utt_emb = utt_dim.map(|d| Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    x
}

/// Gradient checks: every op, then the multilevel model (both combination
/// modes) and the fusion model (both utterance sources) on padded 2-sample
/// batches. `per_param` limits the coordinates checked per parameter tensor.
pub fn gradcheck_suite(eps: f64, per_param: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = op_suite(seed, eps)?
        .into_iter()
        .map(|(name, err)| Check::below(format!("op {name}"), err, GRAD_TOLERANCE))
        .collect();
    let cfg = check_config();
    let utt_dim = 6;
    let batch = |seed: u64| -> Result<Vec<ModelInput>> {
        let a = random_input(&cfg, 6, 3, Some(utt_dim), seed);
        let b = random_input(&cfg, 4, 2, Some(utt_dim), seed + 1);
        pad_batch(&[&a, &b])
    };
    let labels = [1, 3];
    let mut model_check = |name: String, model: &dyn Classifier, s: u64| -> Result<()> {
        let inputs = batch(s)?;
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let (err, at) = param_gradcheck(model, &refs, &labels, per_param, eps, s)?;
        checks.push(Check::below(format!("{name} (worst at {at})"), err, GRAD_TOLERANCE));
        Ok(())
    };
    for mode in [CombineMode::Highway, CombineMode::Concat] {
        let c = ModelConfig { combine_mode: mode, ..cfg.clone() };
        let m = MultilevelModel::new(&c, seed)?;
        model_check(format!("multilevel model, {mode:?} combination"), &m, seed + 10)?;
    }
    for source in [UttSource::File, UttSource::BuiltIn] {
        let f = FusionConfig { utt_dim, fuse_dim: 8, utt_source: source, freeze_fine: false };
        let m = MultiGranularityModel::new(&cfg, &f, seed + 1)?;
        model_check(format!("fusion model, {source:?} utterance vector"), &m, seed + 20)?;
    }
    Ok(checks)
}

/// Largest logit change when frames and words are padded onto utterances.
pub fn padding_drift(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for mode in [CombineMode::Highway, CombineMode::Concat] {
        let cfg = ModelConfig { combine_mode: mode, ..ModelConfig::default() };
        let m = MultilevelModel::new(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..3 {
            let x = random_input(&cfg, rng.gen_range(4..20), rng.gen_range(1..6), None, seed + i);
            let padded = x.padded(x.num_frames() + rng.gen_range(1..9), x.num_words() + rng.gen_range(1..4))?;
            let a = m.logits_batch(&[&x])?;
            let b = m.logits_batch(&[&padded])?;
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    Ok(worst)
}

/// Largest deviation of softmax row sums from one, including wide and
/// large-magnitude rows.
pub fn softmax_row_sum_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let rows = rng.gen_range(1..8);
        let cols = rng.gen_range(1..200);
        let scale = [1.0, 30.0, 700.0][trial % 3];
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data)?);
        let p = g.softmax(x)?;
        let v = g.value(p);
        for r in 0..rows {
            worst = worst.max((v.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn highway_with_zero_gates(dim: usize, layers: usize, gate_bias: f64) -> (ParamStore, Highway) {
    let mut store = ParamStore::new();
    let hw = Highway::new(&mut store, &mut Init::new(1), "hw", dim, layers, gate_bias);
    for (_, t) in &hw.layers {
        let shape = store.get(t.weight).value.shape().to_vec();
        store.get_mut(t.weight).value = Tensor::zeros(shape);
    }
    (store, hw)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Saturated gates: `(copy deviation, transform deviation)`. The copy limit
/// must return the input, the transform limit the stacked `ReLU(affine)`.
pub fn highway_limit_errors(seed: u64) -> Result<(f64, f64)> {
    let dim = 9;
    let u = random_matrix(4, dim, seed)?;
    let (store, hw) = highway_with_zero_gates(dim, 2, -1e6);
    let mut cx = Ctx::eval(&store);
    let uv = cx.g.constant(u.clone());
    let z = hw.forward(&mut cx, uv)?;
    let copy = cx.g.value(z).max_abs_diff(&u);

    let (store, hw) = highway_with_zero_gates(dim, 2, 1e6);
    let mut cx = Ctx::eval(&store);
    let mut expect = u.clone();
    for (h, _) in &hw.layers {
        let w = store.get(h.weight).value.clone();
        let b = store.get(h.bias.expect("transform bias")).value.clone();
        let mut next = Tensor::zeros([expect.rows(), dim]);
        for r in 0..expect.rows() {
            for c in 0..dim {
                let dot: f64 = (0..dim).map(|k| expect.at(r, k) * w.at(k, c)).sum();
                next.data_mut()[r * dim + c] = (dot + b.data()[c]).max(0.0);
            }
        }
        expect = next;
    }
    let uv = cx.g.constant(u);
    let z = hw.forward(&mut cx, uv)?;
    Ok((copy, cx.g.value(z).max_abs_diff(&expect)))
}

/// With every gate at exactly one half, one layer returns `(H(u) + u) / 2`.
pub fn half_gate_error(seed: u64) -> Result<f64> {
    let dim = 7;
    let u = random_matrix(3, dim, seed)?;
    let (store, hw) = highway_with_zero_gates(dim, 1, 0.0);
    let mut cx = Ctx::eval(&store);
    let uv = cx.g.constant(u.clone());
    let z = hw.forward(&mut cx, uv)?;
    let h = hw.layers[0].0.forward(&mut cx, uv)?;
    let h = cx.g.relu(h);
    let (zv, hv) = (cx.g.value(z), cx.g.value(h));
    Ok(zv.data().iter().zip(hv.data()).zip(u.data()).map(|((z, h), u)| (z - 0.5 * (h + u)).abs()).fold(0.0, f64::max))
}

/// Largest WA/UA difference against counting over the expanded per-utterance
/// list of 50 random confusion matrices.
pub fn wa_ua_oracle_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.gen_range(2..7);
        let mut cm = ConfusionMatrix::new(k);
        for row in cm.counts.iter_mut() {
            for c in row.iter_mut() {
                *c = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..30) };
            }
        }
        if cm.total() == 0 {
            cm.counts[0][0] = 1;
        }
        let mut pairs = Vec::new();
        for (t, row) in cm.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                pairs.extend(std::iter::repeat_n((t, p), n as usize));
            }
        }
        let wa = pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64;
        let mut recalls = Vec::new();
        for class in 0..k {
            let of_class: Vec<_> = pairs.iter().filter(|(t, _)| *t == class).collect();
            if !of_class.is_empty() {
                recalls.push(of_class.iter().filter(|(_, p)| *p == class).count() as f64 / of_class.len() as f64);
            }
        }
        let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
        worst = worst.max((cm.wa()? - wa).abs()).max((cm.ua()? - ua).abs());
    }
    Ok(worst)
}

/// Largest difference between the optimizer and a textbook scalar Adam over
/// 100 random gradient steps.
pub fn adam_reference_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 9;
    let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    let start: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(start.clone()));
    let mut opt = Adam::new(cfg, &store);
    let (mut x, mut m, mut v) = (start, vec![0.0; n], vec![0.0; n]);
    for t in 1..=100 {
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        opt.update(&mut store, &[Some(Tensor::vector(g.clone()))])?;
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            x[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    let got = store.iter().next().expect("one parameter").value.data();
    Ok(got.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Number of random signal lengths (out of 1000) where the framer disagrees
/// with enumerating start offsets `0, hop, 2·hop, …` that fit a full window.
pub fn frame_count_mismatches(seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..1000 {
        let sr = [8000, 16000, 22050, 44100][rng.gen_range(0..4)];
        let len = rng.gen_range(0..30_000);
        let (win, hop) = (window_len(sr), hop_len(sr));
        let enumerated = (0..).map(|i| i * hop).take_while(|s| s + win <= len).count();
        let got = frame_signal(&vec![0.0; len], sr).map_or(0, |f| f.len());
        if got != enumerated {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Whether save → load → save reproduces the same bytes for both model kinds.
pub fn checkpoint_round_trip(seed: u64) -> Result<bool> {
    let cfg = check_config();
    let fine = MultilevelModel::new(&cfg, seed)?;
    let fused = MultiGranularityModel::new(&cfg, &FusionConfig { utt_dim: 6, fuse_dim: 8, ..FusionConfig::default() }, seed)?;
    let mut ok = true;
    for (model, mut fresh) in [
        (&fine as &dyn Classifier, MultilevelModel::new(&cfg, seed + 1)?.params),
        (&fused as &dyn Classifier, fused.params.clone()),
    ] {
        let first = checkpoint::encode(&model.checkpoint_header()?, model.params())?;
        let (header, params) = checkpoint::decode(&first, "memory")?;
        checkpoint::apply(&mut fresh, params, "memory")?;
        ok &= checkpoint::encode(&header, &fresh)? == first;
    }
    Ok(ok)
}

/// The numerical invariant suite.
pub fn invariant_suite(seed: u64) -> Result<Vec<Check>> {
    let (copy, transform) = highway_limit_errors(seed)?;
    Ok(vec![
        Check::below("padding invariance, max logit drift", padding_drift(seed)?, 1e-5),
        Check::at_most("softmax row sums, max |sum - 1|", softmax_row_sum_error(seed)?, 1e-6),
        Check::at_most("highway copy limit, max deviation", copy, 0.0),
        Check::at_most("highway transform limit, max deviation", transform, 1e-12),
        Check::at_most("highway half gate identity, max deviation", half_gate_error(seed)?, 1e-15),
        Check::at_most("WA/UA vs expanded-list oracle, 50 matrices", wa_ua_oracle_error(seed)?, 1e-15),
        Check::below("Adam vs scalar reference, 100 steps", adam_reference_error(seed)?, 1e-12),
        Check::at_most("frame count vs enumeration, 1000 lengths (mismatches)", frame_count_mismatches(seed)? as f64, 0.0),
        Check::at_most(
            "checkpoint round trip, differing encodings",
            if checkpoint_round_trip(seed)? { 0.0 } else { 1.0 },
            0.0,
        ),
    ])
}

/// Largest |difference| between fusion logits with a zeroed utterance
/// projection and the fine-grained branch through the head's fine block,
/// over both utterance sources.
pub fn fusion_degradation_error(seed: u64) -> Result<f64> {
    let cfg = ModelConfig { word_table_rows: 0, ..check_config() };
    let mut worst: f64 = 0.0;
    for source in [UttSource::File, UttSource::BuiltIn] {
        let f = FusionConfig { utt_dim: 6, fuse_dim: 8, utt_source: source, freeze_fine: false };
        let mut m = MultiGranularityModel::new(&cfg, &f, seed)?;
        for id in [m.proj_utt.weight, m.proj_utt.bias.expect("projection bias")] {
            let shape = m.params.get(id).value.shape().to_vec();
            m.params.get_mut(id).value = Tensor::zeros(shape);
        }
        let k = cfg.num_classes;
        let head_w = m.params.get(m.head.weight).value.clone();
        let fine_block = Tensor::new(vec![f.fuse_dim, k], head_w.data()[..f.fuse_dim * k].to_vec())?;
        let head_b = m.params.get(m.head.bias.expect("head bias")).value.clone();
        for i in 0..4 {
            let x = random_input(&cfg, 5 + i as usize, 1 + i as usize, Some(6), seed + i);
            let fused = m.logits_batch(&[&x])?;
            let mut cx = Ctx::eval(&m.params);
            let cls = m.encoder.forward(&mut cx, &x)?.cls;
            let p = m.proj_fine.forward(&mut cx, cls)?;
            let w = cx.g.constant(fine_block.clone());
            let b = cx.g.constant(head_b.clone());
            let z = cx.g.matmul(p, w)?;
            let z = cx.g.add_bias(z, b)?;
            worst = worst.max(fused.max_abs_diff(cx.g.value(z)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariant_suite_passes() {
        for c in invariant_suite(11).unwrap() {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn fusion_degrades_exactly() {
        assert_eq!(fusion_degradation_error(2).unwrap(), 0.0);
    }

    #[test]
    fn check_display() {
        assert!(Check::below("x", 0.5, 1.0).to_string().starts_with("PASS x"));
        assert!(Check::at_most("y", 1.0, 0.0).to_string().starts_with("FAIL y"));
    }
}
