use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::train::kfold::{kfold_split, SplitItem};
use crate::train::metrics::ConfusionMatrix;
use crate::train::trainer::{train_fold, EpochLog, Example, TrainConfig};

pub const WORKERS_ENV: &str = "MELFORMER_NUM_WORKERS";

/// Worker pool width: `MELFORMER_NUM_WORKERS` if set, else the CPU count.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: usize,
    pub wa: f64,
    pub ua: f64,
    pub recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub best_epoch: usize,
    pub best_dev_wa: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Mean over folds.
    pub wa: f64,
    pub ua: f64,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub label: String,
    pub wa_mean: f64,
    pub wa_std: f64,
    pub ua_mean: f64,
    pub ua_std: f64,
    pub wa: String,
    pub ua: String,
    pub seeds: Vec<SeedResult>,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn from_seeds(label: &str, seeds: Vec<SeedResult>, config: serde_json::Value, run_id: String) -> Self {
        let (wa_mean, wa_std) = mean_std(&seeds.iter().map(|s| s.wa).collect::<Vec<_>>());
        let (ua_mean, ua_std) = mean_std(&seeds.iter().map(|s| s.ua).collect::<Vec<_>>());
        RunReport {
            run_id,
            label: label.to_string(),
            wa_mean,
            wa_std,
            ua_mean,
            ua_std,
            wa: format_mean_std(wa_mean, wa_std),
            ua: format_mean_std(ua_mean, ua_std),
            seeds,
            config,
        }
    }

    /// Plain-text results table, one row per report, in the given order.
    pub fn table(reports: &[RunReport]) -> String {
        let width = reports.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$} | {:<13} | {:<13}\n", "Model", "WA", "UA");
        out.push_str(&format!("{}-|-{}-|-{}\n", "-".repeat(width), "-".repeat(13), "-".repeat(13)));
        for r in reports {
            out.push_str(&format!("{:<width$} | {} | {}\n", r.label, r.wa, r.ua));
        }
        out
    }
}

/// Short content hash identifying a run.
pub fn run_id(config: &serde_json::Value, ids: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(config.to_string().as_bytes());
    for id in ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..6])
}

/// Model seed for one (seed, fold) job.
pub fn job_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

/// Five-fold cross-validation repeated for every configured seed. Jobs run
/// on a pool of [`worker_count`] threads; each builds its own model with
/// `make(job_seed)`. Best checkpoints go to `ckpt_dir/seed{s}_fold{f}.ckpt`.
pub fn cross_validate<M, F>(
    label: &str,
    examples: &[Example],
    make: F,
    cfg: &TrainConfig,
    config_echo: serde_json::Value,
    ckpt_dir: Option<&Path>,
) -> Result<RunReport>
where
    M: Classifier,
    F: Fn(u64) -> Result<M> + Sync,
{
    cfg.validate()?;
    let items: Vec<SplitItem> = examples
        .iter()
        .map(|e| SplitItem { id: e.id.clone(), label: e.label, session: e.session.clone(), speaker: e.speaker.clone() })
        .collect();
    let plans = kfold_split(&items, cfg.grouping, cfg.split_seed)?;
    let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let resolve = |ids: &[String]| -> Vec<&Example> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let jobs: Vec<(u64, usize)> =
        cfg.seeds.iter().flat_map(|&s| (0..plans.len()).map(move |f| (s, f))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
    let results: Vec<FoldResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, fold)| {
                let plan = &plans[fold];
                let (train, dev, test) = (resolve(&plan.train), resolve(&plan.dev), resolve(&plan.test));
                let js = job_seed(seed, fold);
                let mut model = make(js)?;
                let ckpt = ckpt_dir.map(|d| d.join(format!("seed{seed}_fold{fold}.ckpt")));
                let out = train_fold(&mut model, &train, &dev, &test, cfg, js, ckpt.as_deref())?;
                log::info!(
                    "{label}: seed {seed} fold {fold} test WA {:.3} UA {:.3} (best epoch {})",
                    out.test.wa,
                    out.test.ua,
                    out.best_epoch
                );
                Ok(FoldResult {
                    seed,
                    fold,
                    wa: out.test.wa,
                    ua: out.test.ua,
                    recall: out.test.recall,
                    confusion: out.test.confusion,
                    best_epoch: out.best_epoch,
                    best_dev_wa: out.best_dev_wa,
                    history: out.history,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let seeds = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let folds: Vec<FoldResult> = results.iter().filter(|r| r.seed == seed).cloned().collect();
            let wa = folds.iter().map(|f| f.wa).sum::<f64>() / folds.len() as f64;
            let ua = folds.iter().map(|f| f.ua).sum::<f64>() / folds.len() as f64;
            SeedResult { seed, wa, ua, folds }
        })
        .collect();
    let ids: Vec<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    let id = run_id(&config_echo, &ids);
    Ok(RunReport::from_seeds(label, seeds, config_echo, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(seed: u64, wa: f64) -> SeedResult {
        SeedResult { seed, wa, ua: wa, folds: vec![] }
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let r = RunReport::from_seeds("m", vec![seed(1, 0.6), seed(2, 0.6), seed(3, 0.6)], serde_json::Value::Null, "x".into());
        assert_eq!(r.wa, "0.600 ± 0.000");
    }

    #[test]
    fn two_seed_arithmetic() {
        let r = RunReport::from_seeds("m", vec![seed(1, 0.7), seed(2, 0.8)], serde_json::Value::Null, "x".into());
        assert_eq!(r.wa, "0.750 ± 0.050");
        assert_eq!(r.ua, "0.750 ± 0.050");
    }

    #[test]
    fn table_rows_keep_order() {
        let a = RunReport::from_seeds("text only", vec![seed(1, 0.5)], serde_json::Value::Null, "a".into());
        let b = RunReport::from_seeds("multilevel 1/1/2", vec![seed(1, 0.9)], serde_json::Value::Null, "b".into());
        let t = RunReport::table(&[a.clone(), b.clone()]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("text only") && lines[2].contains("0.500 ± 0.000"));
        assert!(lines[3].starts_with("multilevel 1/1/2"));
        assert_eq!(t, RunReport::table(&[a, b]));
    }

    #[test]
    fn run_id_is_stable_and_content_addressed() {
        let c = serde_json::json!({"lr": 1e-5});
        assert_eq!(run_id(&c, &["a", "b"]), run_id(&c, &["a", "b"]));
        assert_ne!(run_id(&c, &["a", "b"]), run_id(&c, &["ab"]));
        assert_eq!(run_id(&c, &["a"]).len(), 12);
    }

    #[test]
    fn worker_env_is_respected() {
        std::env::set_var(WORKERS_ENV, "3");
        assert_eq!(worker_count(), 3);
        std::env::set_var(WORKERS_ENV, "zero");
        assert!(worker_count() >= 1);
        std::env::remove_var(WORKERS_ENV);
    }
}
