//! End-to-end runs: data preparation, model construction, cross-validated
//! training, layer sweeps, evaluation and prediction. All files of a run are
//! written through one [`RunDir`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ModelKind, RunConfig};
use crate::data::{load_manifest, ExampleBuilder, Manifest, TextResources, WordVocab};
use crate::error::{Error, Result};
use crate::fusion::{load_utterance_embeddings, EmbeddingTable, FusionConfig, MultiGranularityModel, UttSource};
use crate::model::checkpoint::{self, CheckpointHeader};
use crate::model::{Classifier, ModelConfig, ModelInput, MultilevelModel};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Var;
use crate::text::{Lexicon, WordVectors};
use crate::train::{cross_validate, evaluate, Example, FoldMetrics, RunReport};

/// Either classifier, plus the word vocabulary of a trainable word table.
#[derive(Clone, Debug)]
pub struct AnyModel {
    pub net: Net,
    pub vocab: Option<WordVocab>,
}

#[derive(Clone, Debug)]
pub enum Net {
    Multilevel(MultilevelModel),
    Multigranularity(MultiGranularityModel),
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Extra {
    #[serde(default)]
    fusion: Option<FusionConfig>,
    #[serde(default)]
    vocab: Option<Vec<String>>,
}

impl AnyModel {
    fn inner(&self) -> &dyn Classifier {
        match &self.net {
            Net::Multilevel(m) => m,
            Net::Multigranularity(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Classifier {
        match &mut self.net {
            Net::Multilevel(m) => m,
            Net::Multigranularity(m) => m,
        }
    }

    pub fn fusion(&self) -> Option<&FusionConfig> {
        match &self.net {
            Net::Multigranularity(m) => Some(&m.fusion),
            Net::Multilevel(_) => None,
        }
    }

    /// Fresh model for `kind`. A vocabulary must match `cfg.word_table_rows`.
    pub fn new(kind: ModelKind, cfg: &ModelConfig, fusion: &FusionConfig, vocab: Option<WordVocab>, seed: u64) -> Result<Self> {
        let expected = vocab.as_ref().map_or(0, WordVocab::table_rows);
        if cfg.word_table_rows != expected {
            return Err(Error::validation(format!(
                "word_table_rows is {} but the vocabulary needs {expected}",
                cfg.word_table_rows
            )));
        }
        let net = match kind {
            ModelKind::Multilevel => Net::Multilevel(MultilevelModel::new(cfg, seed)?),
            ModelKind::Multigranularity => Net::Multigranularity(MultiGranularityModel::new(cfg, fusion, seed)?),
        };
        Ok(AnyModel { net, vocab })
    }

    /// Sets the trainable word table from word vectors.
    pub fn init_word_table(&mut self, vectors: &WordVectors) -> Result<()> {
        let Some(vocab) = &self.vocab else { return Ok(()) };
        let table = vocab.initial_table(vectors)?;
        let prefix = match self.net {
            Net::Multilevel(_) => "",
            Net::Multigranularity(_) => MultiGranularityModel::FINE_PREFIX,
        };
        let name = format!("{prefix}word_table");
        let params = self.inner_mut().params_mut();
        let id = params.find(&name).ok_or_else(|| Error::Contract(format!("model has no {name}")))?;
        params.get_mut(id).value = table;
        Ok(())
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = path.display().to_string();
        let (header, params) = checkpoint::load(path)?;
        let cfg: ModelConfig =
            serde_json::from_value(header.model.clone()).map_err(|e| Error::format(&source, format!("model config: {e}")))?;
        let extra: Extra = if header.extra.is_null() {
            Extra::default()
        } else {
            serde_json::from_value(header.extra.clone()).map_err(|e| Error::format(&source, format!("header: {e}")))?
        };
        let kind = match header.kind.as_str() {
            MultilevelModel::KIND => ModelKind::Multilevel,
            MultiGranularityModel::KIND => ModelKind::Multigranularity,
            other => return Err(Error::format(&source, format!("unknown model kind {other:?}"))),
        };
        let fusion = extra.fusion.unwrap_or_default();
        let vocab = extra.vocab.map(WordVocab::new);
        let mut model = AnyModel::new(kind, &cfg, &fusion, vocab, 0)?;
        checkpoint::apply(model.params_mut(), params, &source)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_header()?, self.params())
    }
}

impl Classifier for AnyModel {
    fn kind(&self) -> &'static str {
        self.inner().kind()
    }

    fn config(&self) -> &ModelConfig {
        self.inner().config()
    }

    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn logits(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var> {
        self.inner().logits(cx, input)
    }

    fn extra_config(&self) -> serde_json::Value {
        let extra = Extra { fusion: self.fusion().cloned(), vocab: self.vocab.as_ref().map(|v| v.words.clone()) };
        serde_json::to_value(extra).unwrap_or_default()
    }

    fn checkpoint_header(&self) -> Result<CheckpointHeader> {
        Ok(CheckpointHeader {
            kind: self.kind().to_string(),
            model: serde_json::to_value(self.config())?,
            extra: self.extra_config(),
        })
    }
}

/// Lexicon and word vectors named by the data section.
pub fn load_text(data: &DataConfig, word_dim: usize) -> Result<TextResources> {
    let lexicon = match &data.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::new(),
    };
    let vectors = match &data.word_vectors {
        Some(p) => WordVectors::load(p)?,
        None => WordVectors::hashed(word_dim, data.hashed_vectors_seed),
    };
    if vectors.dim() != word_dim {
        return Err(Error::validation(format!("word vectors have {} dims, model expects {word_dim}", vectors.dim())));
    }
    Ok(TextResources { lexicon, vectors })
}

fn load_embeddings(kind: ModelKind, fusion: Option<&FusionConfig>, data: &DataConfig) -> Result<Option<EmbeddingTable>> {
    let needed = kind == ModelKind::Multigranularity && fusion.is_some_and(|f| f.utt_source == UttSource::File);
    if !needed {
        return Ok(None);
    }
    let path = data
        .utt_embeddings
        .as_ref()
        .ok_or_else(|| Error::validation("a multigranularity run with utt_source \"file\" needs data.utt_embeddings"))?;
    let table = load_utterance_embeddings(path)?;
    if let Some(f) = fusion {
        if table.dim != f.utt_dim {
            return Err(Error::validation(format!(
                "utterance embeddings have {} dims, fusion.utt_dim is {}",
                table.dim, f.utt_dim
            )));
        }
    }
    Ok(Some(table))
}

fn manifest_path(data: &DataConfig) -> Result<&Path> {
    data.manifest.as_deref().ok_or_else(|| Error::validation("no manifest given (data.manifest or --manifest)"))
}

/// A training corpus ready for cross-validation under a fully resolved config.
pub struct Prepared {
    /// The resolved config, including the derived word table size.
    pub run: RunConfig,
    pub manifest: Manifest,
    pub text: TextResources,
    pub vocab: Option<WordVocab>,
    pub examples: Vec<Example>,
    fine: Option<AnyModel>,
}

impl Prepared {
    pub fn new(mut run: RunConfig) -> Result<Self> {
        run.validate()?;
        let manifest = load_manifest(manifest_path(&run.data)?, &run.data.labels)?;
        let fine = match &run.fine_checkpoint {
            Some(p) => {
                let m = AnyModel::from_checkpoint(p)?;
                if !matches!(m.net, Net::Multilevel(_)) {
                    return Err(Error::validation(format!("{} is not a multilevel checkpoint", p.display())));
                }
                run.model = m.config().clone();
                Some(m)
            }
            None => None,
        };
        let text = load_text(&run.data, run.model.word_dim)?;
        let vocab = match &fine {
            Some(m) => m.vocab.clone(),
            None if run.data.fine_tune_words => {
                let tokens = crate::data::tokenize_all(&manifest, &text.lexicon)?;
                Some(WordVocab::new(tokens.into_iter().flat_map(|t| t.words)))
            }
            None => None,
        };
        run.model.word_table_rows = vocab.as_ref().map_or(0, WordVocab::table_rows);
        run.validate()?;
        let embeddings = load_embeddings(run.kind, Some(&run.fusion), &run.data)?;
        let builder = ExampleBuilder {
            text: &text,
            cfg: &run.model,
            vocab: vocab.as_ref(),
            embeddings: embeddings.as_ref(),
            cache: run.data.feature_cache.as_deref(),
        };
        let examples = builder.build(&manifest)?;
        Ok(Prepared { run, manifest, text, vocab, examples, fine })
    }

    /// Fresh model for one training job.
    pub fn make_model(&self, cfg: &ModelConfig, seed: u64) -> Result<AnyModel> {
        let mut m = AnyModel::new(self.run.kind, cfg, &self.run.fusion, self.vocab.clone(), seed)?;
        m.init_word_table(&self.text.vectors)?;
        if let (Some(fine), Net::Multigranularity(target)) = (&self.fine, &mut m.net) {
            if let Net::Multilevel(src) = &fine.net {
                target.load_fine(src)?;
            }
        }
        Ok(m)
    }

    /// Five-fold cross-validation over every configured seed.
    pub fn cross_validate(&self, label: &str, cfg: &ModelConfig, ckpt_dir: Option<&Path>) -> Result<RunReport> {
        let mut echo = self.run.clone();
        echo.model = cfg.clone();
        cross_validate(
            label,
            &self.examples,
            |seed| self.make_model(cfg, seed),
            &self.run.train,
            serde_json::to_value(&echo)?,
            ckpt_dir,
        )
    }
}

/// Owner of every file written into one output directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<RunDir> {
        RunDir::create(self.path(name))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }
}

pub fn run_label(kind: ModelKind, cfg: &ModelConfig) -> String {
    let name = match kind {
        ModelKind::Multilevel => "multilevel",
        ModelKind::Multigranularity => "multi-granularity",
    };
    format!("{name} {}/{}/{}", cfg.layers_text, cfg.layers_cross, cfg.layers_fusion)
}

/// Cross-validated training. Writes `config.json`, `results.json`,
/// `results.txt` and `checkpoints/seed{s}_fold{f}.ckpt` under `out`.
pub fn train(run: RunConfig, out: &RunDir) -> Result<RunReport> {
    let prepared = Prepared::new(run)?;
    out.write_json("config.json", &prepared.run)?;
    let ckpts = out.subdir("checkpoints")?;
    let label = run_label(prepared.run.kind, &prepared.run.model);
    let report = prepared.cross_validate(&label, &prepared.run.model, Some(ckpts.root()))?;
    out.write_json("results.json", &report)?;
    out.write_text("results.txt", &RunReport::table(std::slice::from_ref(&report)))?;
    Ok(report)
}

/// Layer counts to sweep, one list per stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub text: Vec<usize>,
    pub cross: Vec<usize>,
    pub fusion: Vec<usize>,
}

impl LayerGrid {
    /// Parses `text=1,2,3` style terms; stacks not named keep `base`'s count.
    pub fn parse(terms: &[String], base: &ModelConfig) -> Result<Self> {
        let mut grid =
            LayerGrid { text: vec![base.layers_text], cross: vec![base.layers_cross], fusion: vec![base.layers_fusion] };
        for term in terms {
            let (key, values) = term
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("layer term {term:?} is not stack=n,m,...")))?;
            let counts = values
                .split(',')
                .map(|v| v.trim().parse::<usize>().ok().filter(|&n| n > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::validation(format!("layer counts in {term:?} must be positive integers")))?;
            match key.trim() {
                "text" => grid.text = counts,
                "cross" => grid.cross = counts,
                "fusion" => grid.fusion = counts,
                other => return Err(Error::validation(format!("unknown stack {other:?}; use text, cross or fusion"))),
            }
        }
        Ok(grid)
    }

    /// Every (text, cross, fusion) combination in row-major order.
    pub fn combinations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &t in &self.text {
            for &c in &self.cross {
                for &f in &self.fusion {
                    out.push((t, c, f));
                }
            }
        }
        out
    }
}

/// One cross-validated run per layer combination, each in its own
/// subdirectory, plus a combined `results.json` / `results.txt`.
pub fn sweep(run: RunConfig, grid: &LayerGrid, out: &RunDir) -> Result<Vec<RunReport>> {
    let prepared = Prepared::new(run)?;
    out.write_json("config.json", &prepared.run)?;
    out.write_json("grid.json", grid)?;
    let mut reports = Vec::new();
    for (t, c, f) in grid.combinations() {
        let cfg = ModelConfig { layers_text: t, layers_cross: c, layers_fusion: f, ..prepared.run.model.clone() };
        let dir = out.subdir(&format!("text{t}_cross{c}_fusion{f}"))?;
        let ckpts = dir.subdir("checkpoints")?;
        let label = format!("{t} | {c} | {f}");
        let report = prepared.cross_validate(&label, &cfg, Some(ckpts.root()))?;
        dir.write_json("results.json", &report)?;
        reports.push(report);
        out.write_json("results.json", &reports)?;
        out.write_text("results.txt", &RunReport::table(&reports))?;
    }
    Ok(reports)
}

/// Examples of `manifest` prepared for an existing model.
pub fn examples_for(model: &AnyModel, data: &DataConfig, manifest: &Manifest) -> Result<Vec<Example>> {
    let cfg = model.config();
    let text = load_text(data, cfg.word_dim)?;
    let kind = match model.net {
        Net::Multilevel(_) => ModelKind::Multilevel,
        Net::Multigranularity(_) => ModelKind::Multigranularity,
    };
    let embeddings = load_embeddings(kind, model.fusion(), data)?;
    ExampleBuilder {
        text: &text,
        cfg,
        vocab: model.vocab.as_ref(),
        embeddings: embeddings.as_ref(),
        cache: data.feature_cache.as_deref(),
    }
    .build(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub labels: Vec<String>,
    pub num_utterances: usize,
    pub metrics: FoldMetrics,
}

pub fn eval(checkpoint: &Path, data: &DataConfig) -> Result<EvalReport> {
    let model = AnyModel::from_checkpoint(checkpoint)?;
    let path = manifest_path(data)?;
    let manifest = load_manifest(path, &data.labels)?;
    let examples = examples_for(&model, data, &manifest)?;
    let refs: Vec<&Example> = examples.iter().collect();
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        manifest: path.to_path_buf(),
        labels: manifest.labels.clone(),
        num_utterances: examples.len(),
        metrics: evaluate(&model, &refs)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub predicted: String,
    pub probabilities: Vec<(String, f64)>,
}

pub fn predict(checkpoint: &Path, data: &DataConfig) -> Result<Vec<Prediction>> {
    let model = AnyModel::from_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest_path(data)?, &data.labels)?;
    let examples = examples_for(&model, data, &manifest)?;
    examples
        .iter()
        .map(|e| {
            let p = model.predict(&e.input)?;
            let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            Ok(Prediction {
                id: e.id.clone(),
                predicted: manifest.labels[best].clone(),
                probabilities: manifest.labels.iter().cloned().zip(p).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn small_run(dir: &Path, per_class: usize) -> RunConfig {
        let spec = SyntheticSpec { per_class, classes: 2, ..SyntheticSpec::default() };
        let manifest = gen_synthetic(&spec, dir).unwrap();
        let mut run = RunConfig::default();
        run.model = ModelConfig { num_classes: 2, word_dim: 8, ..ModelConfig::tiny() };
        run.data.labels = spec.labels();
        run.data.manifest = Some(manifest);
        run.train.max_epochs = 1;
        run.train.seeds = vec![5];
        run.train.lr = 1e-3;
        run
    }

    #[test]
    fn checkpoint_rebuilds_any_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { word_dim: 8, word_table_rows: 3, ..ModelConfig::tiny() };
        let vocab = WordVocab::new(["a".to_string(), "b".to_string()]);
        let fusion = FusionConfig { utt_dim: 5, fuse_dim: 4, ..FusionConfig::default() };
        let m = AnyModel::new(ModelKind::Multigranularity, &cfg, &fusion, Some(vocab.clone()), 3).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = AnyModel::from_checkpoint(&path).unwrap();
        assert_eq!(back.vocab, Some(vocab));
        assert_eq!(back.fusion(), Some(&fusion));
        assert_eq!(back.config(), &cfg);
        assert_eq!(
            checkpoint::encode(&back.checkpoint_header().unwrap(), back.params()).unwrap(),
            std::fs::read(&path).unwrap()
        );
        let wrong = AnyModel::new(ModelKind::Multilevel, &cfg, &fusion, None, 3);
        assert!(wrong.is_err());
    }

    #[test]
    fn layer_grid_parsing() {
        let base = ModelConfig::default();
        let g = LayerGrid::parse(&["text=1,2".into(), "fusion=3".into()], &base).unwrap();
        assert_eq!(g.combinations(), vec![(1, 1, 3), (2, 1, 3)]);
        assert!(LayerGrid::parse(&["text=0".into()], &base).is_err());
        assert!(LayerGrid::parse(&["deep=1".into()], &base).is_err());
        assert!(LayerGrid::parse(&["text".into()], &base).is_err());
    }

    #[test]
    fn train_writes_echo_results_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path(), 5);
        run.data.fine_tune_words = true;
        let out = RunDir::create(dir.path().join("run")).unwrap();
        let report = train(run.clone(), &out).unwrap();
        assert_eq!(report.seeds.len(), 1);
        assert_eq!(report.seeds[0].folds.len(), 5);
        let echo = RunConfig::load(out.path("config.json")).unwrap();
        assert!(echo.model.word_table_rows > 0);
        assert_eq!(echo.train, run.train);
        let txt = std::fs::read_to_string(out.path("results.txt")).unwrap();
        assert!(txt.contains("multilevel 1/1/2"), "{txt}");
        let ckpt = out.path("checkpoints/seed5_fold0.ckpt");
        let data = DataConfig { manifest: run.data.manifest.clone(), ..echo.data.clone() };
        let ev = eval(&ckpt, &data).unwrap();
        assert_eq!(ev.num_utterances, 10);
        let preds = predict(&ckpt, &data).unwrap();
        assert_eq!(preds.len(), 10);
        for p in preds {
            let s: f64 = p.probabilities.iter().map(|(_, v)| v).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn echoed_config_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let run = small_run(dir.path(), 5);
        let a = RunDir::create(dir.path().join("a")).unwrap();
        let first = train(run, &a).unwrap();
        let b = RunDir::create(dir.path().join("b")).unwrap();
        let second = train(RunConfig::load(a.path("config.json")).unwrap(), &b).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn fusion_run_needs_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = small_run(dir.path(), 5);
        run.kind = ModelKind::Multigranularity;
        let err = Prepared::new(run.clone()).err().unwrap().to_string();
        assert!(err.contains("utt_embeddings"), "{err}");
        run.fusion.utt_source = UttSource::BuiltIn;
        run.fusion.utt_dim = 6;
        run.fusion.fuse_dim = 4;
        let p = Prepared::new(run).unwrap();
        let m = p.make_model(&p.run.model, 1).unwrap();
        assert_eq!(m.kind(), "multigranularity");
    }
}
