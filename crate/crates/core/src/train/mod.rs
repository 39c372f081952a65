//! Optimizer, metrics, cross-validation splits, training loop and reporting.

pub mod adam;
pub mod kfold;
pub mod metrics;
pub mod report;
mod trainer;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use kfold::{assign_groups, kfold_split, FoldPlan, Grouping, SplitItem, NUM_FOLDS};
pub use metrics::{ConfusionMatrix, FoldMetrics};
pub use report::{cross_validate, format_mean_std, mean_std, worker_count, FoldResult, RunReport, SeedResult};
pub use trainer::{evaluate, pad_batch, train_fold, train_step, EpochLog, Example, FoldOutcome, TrainConfig};
