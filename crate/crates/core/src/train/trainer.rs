use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{checkpoint, Classifier, ModelInput};
use crate::nn::Ctx;
use crate::train::adam::{clip_grad_norm, Adam, AdamConfig};
use crate::train::kfold::Grouping;
use crate::train::metrics::FoldMetrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    pub grouping: Grouping,
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            clip_norm: 5.0,
            seeds: vec![1, 2, 3],
            grouping: Grouping::Auto,
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("at least one seed is required"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::validation("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// One labelled utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub input: ModelInput,
    pub session: Option<String>,
    pub speaker: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_wa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    /// 0 when no epoch was run.
    pub best_epoch: usize,
    pub best_dev_wa: f64,
    pub history: Vec<EpochLog>,
    pub test: FoldMetrics,
    pub checkpoint: Option<PathBuf>,
}

/// Eval-mode metrics over `examples`.
pub fn evaluate<M: Classifier + ?Sized>(model: &M, examples: &[&Example]) -> Result<FoldMetrics> {
    if examples.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    let k = model.config().num_classes;
    let mut truth = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        let z = model.logits_batch(&[&ex.input])?;
        truth.push(ex.label);
        pred.push(z.argmax_rows()[0]);
    }
    FoldMetrics::from_pairs(k, &truth, &pred)
}

/// Pads every input to the longest mel and word sequence of the batch.
pub fn pad_batch(batch: &[&ModelInput]) -> Result<Vec<ModelInput>> {
    let frames = batch.iter().map(|x| x.mel.rows()).max().unwrap_or(0);
    let words = batch.iter().map(|x| x.word_vecs.rows()).max().unwrap_or(0);
    batch.iter().map(|x| x.padded(frames, words)).collect()
}

/// One optimizer step on a batch; returns the mean loss.
pub fn train_step<M: Classifier + ?Sized>(
    model: &mut M,
    opt: &mut Adam,
    batch: &[&Example],
    clip_norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inputs: Vec<&ModelInput> = batch.iter().map(|e| &e.input).collect();
    let padded = pad_batch(&inputs)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let dropout = model.config().dropout;
    let (loss, mut grads) = {
        let mut cx = Ctx::train(model.params(), dropout, rng);
        let rows = padded.iter().map(|x| model.logits(&mut cx, x)).collect::<Result<Vec<_>>>()?;
        let z = cx.g.concat_rows(&rows)?;
        let l = cx.g.cross_entropy(z, &labels)?;
        let loss = cx.g.value(l).item();
        if !loss.is_finite() {
            return Ok(loss);
        }
        cx.g.backward(l)?;
        (loss, cx.param_grads())
    };
    clip_grad_norm(&mut grads, clip_norm);
    opt.update(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Trains with early stopping on dev WA and reports test metrics of the best
/// epoch. Ties keep the earlier epoch. With `ckpt` set, the initial and then
/// each new best parameter set is written there.
pub fn train_fold<M: Classifier + ?Sized>(
    model: &mut M,
    train: &[&Example],
    dev: &[&Example],
    test: &[&Example],
    cfg: &TrainConfig,
    seed: u64,
    ckpt: Option<&Path>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.adam(), model.params());
    let save = |model: &M| -> Result<Option<PathBuf>> {
        match ckpt {
            Some(path) => {
                checkpoint::save(path, &model.checkpoint_header()?, model.params())?;
                Ok(Some(path.to_path_buf()))
            }
            None => Ok(None),
        }
    };
    let mut saved = save(model)?;
    let mut best_params = model.params().clone();
    let mut best_dev = if cfg.max_epochs == 0 { evaluate(model, dev)?.wa } else { f64::NEG_INFINITY };
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| train[i]).collect();
            let diverged = |reason: String| Error::Diverged { epoch, reason, last_good: saved.clone() };
            let loss = match train_step(model, &mut opt, &batch, cfg.clip_norm, &mut rng) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(format!("loss is {l}"))),
                Err(Error::Numeric(m)) => return Err(diverged(m)),
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let dev_wa = evaluate(model, dev)?.wa;
        log::debug!("epoch {epoch}: loss {train_loss:.4} dev WA {dev_wa:.4}");
        history.push(EpochLog { epoch, train_loss, dev_wa });
        if dev_wa > best_dev {
            best_dev = dev_wa;
            best_epoch = epoch;
            best_params = model.params().clone();
            saved = save(model)?;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    model.params_mut().load_from(&best_params)?;
    let test = evaluate(model, test)?;
    Ok(FoldOutcome { best_epoch, best_dev_wa: best_dev, history, test, checkpoint: saved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, MultilevelModel};
    use crate::tensor::Tensor;
    use rand::Rng;

    pub(crate) fn toy_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % cfg.num_classes;
                let frames = rng.gen_range(3..6);
                let mut mel = vec![0.0; frames * cfg.mel_dim];
                for f in 1..frames {
                    for j in 0..cfg.mel_dim {
                        mel[f * cfg.mel_dim + j] = rng.gen_range(-0.3..0.3) + if j == label { 2.0 } else { 0.0 };
                    }
                }
                let words = rng.gen_range(1..3);
                let vecs = (0..words * cfg.word_dim).map(|_| rng.gen_range(-0.3..0.3)).collect();
                Example {
                    id: format!("u{i}"),
                    label,
                    input: ModelInput::new(
                        Tensor::new(vec![frames, cfg.mel_dim], mel).unwrap(),
                        Tensor::new(vec![words, cfg.word_dim], vecs).unwrap(),
                        vec![],
                        (0..words).map(|w| vec![2 + label as u32, 5 + w as u32]).collect(),
                    ),
                    session: None,
                    speaker: None,
                }
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig { word_dim: 6, mel_dim: 8, dropout: 0.0, ..ModelConfig::tiny() }
    }

    #[test]
    fn patience_zero_stops_one_epoch_after_best() {
        let c = cfg();
        let data = toy_examples(&c, 12, 1);
        let refs: Vec<&Example> = data.iter().collect();
        let mut m = MultilevelModel::new(&c, 2).unwrap();
        let tc = TrainConfig { lr: 1e-9, patience: 0, max_epochs: 20, ..TrainConfig::default() };
        let out = train_fold(&mut m, &refs, &refs, &refs, &tc, 3, None).unwrap();
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn same_seed_reproduces_history() {
        let c = ModelConfig { dropout: 0.1, ..cfg() };
        let data = toy_examples(&c, 8, 4);
        let refs: Vec<&Example> = data.iter().collect();
        let tc = TrainConfig { lr: 1e-3, max_epochs: 3, ..TrainConfig::default() };
        let run = || {
            let mut m = MultilevelModel::new(&c, 5).unwrap();
            train_fold(&mut m, &refs, &refs, &refs, &tc, 6, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_checkpoint_dominates_history() {
        let c = cfg();
        let data = toy_examples(&c, 16, 7);
        let train: Vec<&Example> = data[..12].iter().collect();
        let dev: Vec<&Example> = data[12..].iter().collect();
        let tc = TrainConfig { lr: 3e-3, max_epochs: 6, patience: 2, ..TrainConfig::default() };
        let mut m = MultilevelModel::new(&c, 8).unwrap();
        let out = train_fold(&mut m, &train, &dev, &dev, &tc, 9, None).unwrap();
        assert!(out.history.iter().all(|h| h.dev_wa <= out.best_dev_wa));
        assert_eq!(evaluate(&m, &dev).unwrap().wa, out.best_dev_wa);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let c = cfg();
        let data = toy_examples(&c, 24, 10);
        let refs: Vec<&Example> = data.iter().collect();
        let tc = TrainConfig { lr: 3e-3, max_epochs: 15, patience: 15, ..TrainConfig::default() };
        let mut m = MultilevelModel::new(&c, 11).unwrap();
        let out = train_fold(&mut m, &refs, &refs, &refs, &tc, 12, None).unwrap();
        assert!(out.best_dev_wa >= 0.9, "{:?}", out.history);
    }

    #[test]
    fn zero_epochs_evaluates_initial_model() {
        let c = cfg();
        let data = toy_examples(&c, 8, 13);
        let refs: Vec<&Example> = data.iter().collect();
        let tc = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let mut m = MultilevelModel::new(&c, 14).unwrap();
        let before = m.params.clone();
        let out = train_fold(&mut m, &refs, &refs, &refs, &tc, 15, None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(m.params, before);
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let c = cfg();
        let mut data = toy_examples(&c, 8, 16);
        let refs_dev: Vec<Example> = data.clone();
        data[3].input.mel.data_mut()[c.mel_dim + 1] = f64::NAN;
        let train: Vec<&Example> = data.iter().collect();
        let dev: Vec<&Example> = refs_dev.iter().collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let tc = TrainConfig { max_epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let mut m = MultilevelModel::new(&c, 17).unwrap();
        match train_fold(&mut m, &train, &dev, &dev, &tc, 1, Some(&path)) {
            Err(e @ Error::Diverged { epoch: 1, .. }) => {
                assert!(e.to_string().contains("best.ckpt"), "{e}");
                assert!(path.exists());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn padded_batch_has_common_lengths() {
        let c = cfg();
        let data = toy_examples(&c, 4, 18);
        let inputs: Vec<&ModelInput> = data.iter().map(|e| &e.input).collect();
        let padded = pad_batch(&inputs).unwrap();
        let frames = inputs.iter().map(|x| x.mel.rows()).max().unwrap();
        for (p, x) in padded.iter().zip(&inputs) {
            assert_eq!(p.mel.rows(), frames);
            assert_eq!(p.num_frames(), x.mel.rows());
        }
    }
}
