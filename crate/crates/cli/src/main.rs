//! `melformer` command line.
//!
//! Settings are resolved in three layers: built-in defaults, then the JSON
//! file given with `--config`, then individual flags. The resolved result is
//! written to the output directory of every run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use melformer::config::{DataConfig, ModelKind, RunConfig};
use melformer::data::{featurize, gen_synthetic, load_manifest, SyntheticSpec};
use melformer::experiment::{self, LayerGrid, RunDir};
use melformer::fusion::UttSource;
use melformer::model::CombineMode;
use melformer::train::Grouping;
use melformer::verify::{gradcheck_suite, GRAD_EPS};
use melformer::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "melformer", version, about = "Multilevel audio + text emotion classifier")]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute log-mel features for every audio record into a cache directory.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache directory [default: `features/` next to the manifest].
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Comma-separated label set, in class-index order.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Five-fold cross-validated training over every configured seed.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cross-validated training for every combination of layer counts.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        /// Layer counts per stack, e.g. `text=1,2,3 cross=1,2,3 fusion=1,2,3`.
        #[arg(long, num_args = 1.., required = true)]
        layers: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// WA, UA and confusion matrix of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Class probabilities for every record of a manifest, as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference gradient checks of every op and both models.
    Gradcheck {
        #[arg(long, default_value_t = GRAD_EPS)]
        eps: f64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 64)]
        per_param: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic tone + template-sentence corpus and its manifest.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        sample_rate: Option<u32>,
        #[arg(long)]
        min_secs: Option<f64>,
        #[arg(long)]
        max_secs: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    word_vectors: Option<PathBuf>,
    #[arg(long)]
    utt_embeddings: Option<PathBuf>,
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    /// Comma-separated label set, in class-index order.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
}

impl DataArgs {
    fn apply(&self, d: &mut DataConfig) {
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if let Some(p) = src {
                *dst = Some(absolute(p));
            }
        };
        set(&mut d.manifest, &self.manifest);
        set(&mut d.lexicon, &self.lexicon);
        set(&mut d.word_vectors, &self.word_vectors);
        set(&mut d.utt_embeddings, &self.utt_embeddings);
        set(&mut d.feature_cache, &self.feature_cache);
        if let Some(l) = &self.labels {
            d.labels.clone_from(l);
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// `multilevel` or `multigranularity`.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    layers_text: Option<usize>,
    #[arg(long)]
    layers_cross: Option<usize>,
    #[arg(long)]
    layers_fusion: Option<usize>,
    /// `highway` or `concat`.
    #[arg(long)]
    combine: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `auto`, `session`, `speaker` or `random`.
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Learn a word table initialised from the word vectors.
    #[arg(long)]
    fine_tune_words: bool,
    /// `file` or `built_in`.
    #[arg(long)]
    utt_source: Option<String>,
    /// Multilevel checkpoint whose encoder initialises the fusion model.
    #[arg(long)]
    fine_checkpoint: Option<PathBuf>,
    /// Keep the multilevel encoder fixed while fusion layers train.
    #[arg(long)]
    freeze_fine: bool,
}

/// Flag paths are taken relative to the working directory.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Parses a lowercase enum name through its serde representation.
fn named<T: for<'de> serde::Deserialize<'de>>(flag: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::validation(format!("--{flag}: unknown value {value:?}")))
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = base_config(self.config.as_deref())?;
        self.data.apply(&mut c.data);
        if let Some(k) = &self.kind {
            c.kind = named::<ModelKind>("kind", k)?;
        }
        if let Some(v) = self.layers_text {
            c.model.layers_text = v;
        }
        if let Some(v) = self.layers_cross {
            c.model.layers_cross = v;
        }
        if let Some(v) = self.layers_fusion {
            c.model.layers_fusion = v;
        }
        if let Some(m) = &self.combine {
            c.model.combine_mode = named::<CombineMode>("combine", m)?;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            c.train.max_epochs = v;
        }
        if let Some(v) = self.patience {
            c.train.patience = v;
        }
        if let Some(v) = &self.seeds {
            c.train.seeds.clone_from(v);
        }
        if let Some(g) = &self.grouping {
            c.train.grouping = named::<Grouping>("grouping", g)?;
        }
        if let Some(v) = self.split_seed {
            c.train.split_seed = v;
        }
        if self.fine_tune_words {
            c.data.fine_tune_words = true;
        }
        if let Some(s) = &self.utt_source {
            c.fusion.utt_source = named::<UttSource>("utt-source", s)?;
        }
        if let Some(p) = &self.fine_checkpoint {
            c.fine_checkpoint = Some(absolute(p));
        }
        if self.freeze_fine {
            c.fusion.freeze_fine = true;
        }
        c.validate()?;
        Ok(c)
    }
}

fn data_config(config: Option<&Path>, args: &DataArgs) -> Result<DataConfig> {
    let mut d = base_config(config)?.data;
    args.apply(&mut d);
    Ok(d)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Featurize { manifest, cache, labels } => {
            let labels = labels.unwrap_or_else(melformer::data::default_labels);
            let m = load_manifest(&manifest, &labels)?;
            let cache = cache.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new("")).join("features"));
            let stats = featurize(&m, &cache)?;
            let summary = serde_json::json!({
                "manifest": manifest,
                "cache": cache,
                "labels": labels,
                "written": stats.written,
                "reused": stats.reused,
            });
            RunDir::create(&cache)?.write_json("featurize.json", &summary)?;
            print_json(&summary)
        }
        Command::Train { out, run } => {
            let cfg = run.resolve()?;
            let dir = RunDir::create(out)?;
            let report = experiment::train(cfg, &dir)?;
            print!("{}", melformer::train::RunReport::table(std::slice::from_ref(&report)));
            Ok(())
        }
        Command::Sweep { out, layers, run } => {
            let cfg = run.resolve()?;
            let grid = LayerGrid::parse(&layers, &cfg.model)?;
            let dir = RunDir::create(out)?;
            let reports = experiment::sweep(cfg, &grid, &dir)?;
            print!("{}", melformer::train::RunReport::table(&reports));
            Ok(())
        }
        Command::Eval { checkpoint, out, config, data } => {
            let d = data_config(config.as_deref(), &data)?;
            let report = experiment::eval(&checkpoint, &d)?;
            if let Some(out) = out {
                let dir = RunDir::create(out)?;
                dir.write_json("config.json", &serde_json::json!({"checkpoint": checkpoint, "data": d}))?;
                dir.write_json("eval.json", &report)?;
            }
            print_json(&report)
        }
        Command::Predict { checkpoint, out, config, data } => {
            let d = data_config(config.as_deref(), &data)?;
            let preds = experiment::predict(&checkpoint, &d)?;
            let lines: Vec<String> = preds.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
            if let Some(out) = out {
                let dir = RunDir::create(out)?;
                dir.write_json("config.json", &serde_json::json!({"checkpoint": checkpoint, "data": d}))?;
                dir.write_text("predictions.jsonl", &(lines.join("\n") + "\n"))?;
            }
            for l in lines {
                println!("{l}");
            }
            Ok(())
        }
        Command::Gradcheck { eps, per_param, seed, out } => {
            let checks = gradcheck_suite(eps, per_param, seed)?;
            for c in &checks {
                println!("{c}");
            }
            if let Some(out) = out {
                let dir = RunDir::create(out)?;
                dir.write_json(
                    "config.json",
                    &serde_json::json!({"eps": eps, "per_param": per_param, "seed": seed}),
                )?;
                dir.write_json("gradcheck.json", &checks)?;
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed: {}", failed.join("; "))))
            }
        }
        Command::GenSynthetic { out, classes, per_class, sample_rate, min_secs, max_secs, noise, seed } => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                classes: classes.unwrap_or(d.classes),
                per_class: per_class.unwrap_or(d.per_class),
                sample_rate: sample_rate.unwrap_or(d.sample_rate),
                min_secs: min_secs.unwrap_or(d.min_secs),
                max_secs: max_secs.unwrap_or(d.max_secs),
                noise: noise.unwrap_or(d.noise),
                seed: seed.unwrap_or(d.seed),
            };
            let dir = RunDir::create(&out)?;
            let manifest = gen_synthetic(&spec, dir.root())?;
            dir.write_json("spec.json", &spec)?;
            print_json(&serde_json::json!({"manifest": manifest, "labels": spec.labels(), "utterances": spec.classes * spec.per_class}))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
