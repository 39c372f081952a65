//! Late fusion of the multilevel model's first fused vector with an
//! utterance-level embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig, ModelInput, MultilevelEncoder, MultilevelModel};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_UTT_DIM: usize = 768;

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub id: String,
    pub vector: Tensor,
    pub provider: String,
}

/// Utterance id → embedding, all of one dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<String, UtteranceEmbedding>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceEmbedding> {
        self.entries.get(id)
    }

    /// Fails with every id that has no embedding, sorted.
    pub fn require<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: BTreeSet<&str> = ids.into_iter().filter(|id| !self.entries.contains_key(*id)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let list: Vec<&str> = missing.into_iter().collect();
        Err(Error::validation(format!(
            "{} utterance id(s) have no embedding: {}",
            list.len(),
            list.join(", ")
        )))
    }
}

/// Parses `UEMB <dim>` followed by `<id> <dim floats>` lines.
pub fn parse_utterance_embeddings(text: &str, source: &str) -> Result<EmbeddingTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or_else(|| Error::format(source, "missing `UEMB <dim>` header"))?;
    let mut parts = head.split_whitespace();
    let dim = match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
        (Some("UEMB"), Some(Ok(d)), None) if d > 0 => d,
        _ => return Err(Error::format(format!("{source}:1"), format!("bad header {head:?}, expected `UEMB <dim>`"))),
    };
    let provider = Path::new(source).file_name().map_or_else(|| source.to_string(), |f| f.to_string_lossy().into());
    let mut entries = BTreeMap::new();
    for (n, line) in lines {
        let at = format!("{source}:{}", n + 1);
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        let values: Vec<f64> = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(&at, e.to_string()))?;
        if values.len() != dim {
            return Err(Error::format(&at, format!("{id}: expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&at, format!("{id}: non-finite value")));
        }
        if entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate utterance id {id} at {at}")));
        }
        let vector = Tensor::vector(values);
        entries.insert(id.clone(), UtteranceEmbedding { id, vector, provider: provider.clone() });
    }
    Ok(EmbeddingTable { dim, entries })
}

pub fn load_utterance_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_utterance_embeddings(&text, &path.display().to_string())
}

/// Where the utterance-level vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UttSource {
    /// Pre-computed vectors carried in [`ModelInput::utt_emb`].
    File,
    /// Mean of the utterance's word vectors through one trainable affine map.
    BuiltIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub utt_dim: usize,
    pub fuse_dim: usize,
    pub utt_source: UttSource,
    /// Keeps the multilevel encoder fixed while the fusion layers train.
    pub freeze_fine: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { utt_dim: DEFAULT_UTT_DIM, fuse_dim: 128, utt_source: UttSource::File, freeze_fine: false }
    }
}

/// Multilevel encoder and utterance embedding, each projected to
/// `fuse_dim`, concatenated, and classified by one affine head.
#[derive(Clone, Debug)]
pub struct MultiGranularityModel {
    pub cfg: ModelConfig,
    pub fusion: FusionConfig,
    pub params: ParamStore,
    pub encoder: MultilevelEncoder,
    pub utt_encoder: Option<Linear>,
    pub proj_fine: Linear,
    pub proj_utt: Linear,
    pub head: Linear,
}

impl MultiGranularityModel {
    pub const KIND: &'static str = "multigranularity";
    pub const FINE_PREFIX: &'static str = "fine.";

    pub fn new(cfg: &ModelConfig, fusion: &FusionConfig, seed: u64) -> Result<Self> {
        if fusion.utt_dim == 0 || fusion.fuse_dim == 0 {
            return Err(Error::validation("fusion dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = MultilevelEncoder::new(&mut params, &mut init, Self::FINE_PREFIX, cfg)?;
        let utt_encoder = (fusion.utt_source == UttSource::BuiltIn)
            .then(|| Linear::new(&mut params, &mut init, "utt_encoder", cfg.word_dim, fusion.utt_dim));
        let proj_fine = Linear::new(&mut params, &mut init, "proj_fine", cfg.d_model, fusion.fuse_dim);
        let proj_utt = Linear::new(&mut params, &mut init, "proj_utt", fusion.utt_dim, fusion.fuse_dim);
        let head = Linear::with_bias_value(&mut params, &mut init, "head", 2 * fusion.fuse_dim, cfg.num_classes, 0.0);
        if fusion.freeze_fine {
            params.set_trainable(Self::FINE_PREFIX, false);
        }
        Ok(MultiGranularityModel {
            cfg: cfg.clone(),
            fusion: fusion.clone(),
            params,
            encoder,
            utt_encoder,
            proj_fine,
            proj_utt,
            head,
        })
    }

    /// Copies the encoder weights of a trained multilevel model.
    pub fn load_fine(&mut self, fine: &MultilevelModel) -> Result<()> {
        for p in fine.params.iter().filter(|p| !p.name.starts_with("head.")) {
            let name = format!("{}{}", Self::FINE_PREFIX, p.name);
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::validation(format!("fusion model has no parameter {name}")))?;
            let dst = self.params.get_mut(id);
            if dst.value.shape() != p.value.shape() {
                return Err(Error::validation(format!("shape mismatch for {name}")));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// `[1×utt_dim]` utterance vector for `input`.
    pub fn utterance_vector(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var> {
        match &self.utt_encoder {
            Some(enc) => {
                let n = input.num_words();
                let mean: Vec<f64> = (0..self.cfg.word_dim)
                    .map(|j| (0..n).map(|i| input.word_vecs.at(i, j)).sum::<f64>() / n as f64)
                    .collect();
                let x = cx.g.constant(Tensor::new(vec![1, mean.len()], mean)?);
                enc.forward(cx, x)
            }
            None => {
                let e = input
                    .utt_emb
                    .as_ref()
                    .ok_or_else(|| Error::validation("utterance embedding missing for fusion model"))?;
                if e.len() != self.fusion.utt_dim {
                    return Err(Error::dim(format!(
                        "utterance embedding has {} values, model expects {}",
                        e.len(),
                        self.fusion.utt_dim
                    )));
                }
                Ok(cx.g.constant(e.reshape([1, e.len()])?))
            }
        }
    }

    /// Head input and logits given the fine-grained vector `[1×D]`.
    pub fn fuse(&self, cx: &mut Ctx, cls: Var, utt: Var) -> Result<Var> {
        let f = self.proj_fine.forward(cx, cls)?;
        let u = self.proj_utt.forward(cx, utt)?;
        let joined = cx.g.concat_cols(&[f, u])?;
        self.head.forward(cx, joined)
    }
}

impl Classifier for MultiGranularityModel {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn extra_config(&self) -> serde_json::Value {
        serde_json::to_value(&self.fusion).unwrap_or_default()
    }

    fn logits(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var> {
        let out = self.encoder.forward(cx, input)?;
        let utt = self.utterance_vector(cx, input)?;
        self.fuse(cx, out.cls, utt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { word_dim: 12, mel_dim: 10, ..ModelConfig::tiny() }
    }

    fn input(cfg: &ModelConfig, utt_dim: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(3..7);
        let words = rng.gen_range(1..4);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mut x = ModelInput::new(
            Tensor::new(vec![frames, cfg.mel_dim], r(frames * cfg.mel_dim)).unwrap(),
            Tensor::new(vec![words, cfg.word_dim], r(words * cfg.word_dim)).unwrap(),
            vec![],
            (0..words).map(|i| vec![3 + i as u32, 10, 20]).collect(),
        );
        x.utt_emb = Some(Tensor::vector(r(utt_dim)));
        x
    }

    #[test]
    fn parses_embedding_file() {
        let t = parse_utterance_embeddings("UEMB 8\na 1 2 3 4 5 6 7 8\nb 0 0 0 0 0 0 0 0\nc 1 1 1 1 1 1 1 1\n", "e.txt")
            .unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.entries.values().all(|e| e.vector.len() == 8));
        assert_eq!(t.get("a").unwrap().provider, "e.txt");
        assert!(parse_utterance_embeddings("UEMB 4\n", "e").unwrap().is_empty());
    }

    #[test]
    fn embedding_file_errors() {
        let dup = parse_utterance_embeddings("UEMB 2\nx 1 2\nx 3 4\n", "e").unwrap_err();
        assert!(matches!(&dup, Error::Validation(m) if m.contains("x")), "{dup}");
        let short = parse_utterance_embeddings("UEMB 3\nx 1 2\n", "e").unwrap_err();
        assert!(matches!(&short, Error::Format { context, .. } if context == "e:2"), "{short}");
        assert!(matches!(parse_utterance_embeddings("EMB 3\n", "e"), Err(Error::Format { .. })));
        let t = parse_utterance_embeddings("UEMB 1\na 1\n", "e").unwrap();
        let missing = t.require(["a", "q", "b"]).unwrap_err().to_string();
        assert!(missing.contains("b, q"), "{missing}");
    }

    #[test]
    fn zero_utterance_projection_reduces_to_fine_head() {
        let c = cfg();
        for source in [UttSource::File, UttSource::BuiltIn] {
            let f = FusionConfig { utt_dim: 6, fuse_dim: 8, utt_source: source, freeze_fine: false };
            let mut m = MultiGranularityModel::new(&c, &f, 3).unwrap();
            for id in [m.proj_utt.weight, m.proj_utt.bias.unwrap()] {
                let shape = m.params.get(id).value.shape().to_vec();
                m.params.get_mut(id).value = Tensor::zeros(shape);
            }
            let head_w = m.params.get(m.head.weight).value.clone();
            let top = Tensor::new(vec![8, c.num_classes], head_w.data()[..8 * c.num_classes].to_vec()).unwrap();
            let head_b = m.params.get(m.head.bias.unwrap()).value.clone();

            let x = input(&c, 6, 4);
            let mut cx = Ctx::eval(&m.params);
            let fused = m.logits(&mut cx, &x).unwrap();
            let fused = cx.g.value(fused).clone();

            let mut cx = Ctx::eval(&m.params);
            let cls = m.encoder.forward(&mut cx, &x).unwrap().cls;
            let p = m.proj_fine.forward(&mut cx, cls).unwrap();
            let w = cx.g.constant(top.clone());
            let b = cx.g.constant(head_b.clone());
            let z = cx.g.matmul(p, w).unwrap();
            let z = cx.g.add_bias(z, b).unwrap();
            assert_eq!(&fused, cx.g.value(z), "{source:?}");
        }
    }

    #[test]
    fn zero_embedding_and_bias_leaves_only_fine_branch() {
        let c = cfg();
        let f = FusionConfig { utt_dim: 5, fuse_dim: 4, ..FusionConfig::default() };
        let mut m = MultiGranularityModel::new(&c, &f, 8).unwrap();
        let b = m.proj_utt.bias.unwrap();
        m.params.get_mut(b).value = Tensor::zeros([4]);
        let mut x = input(&c, 5, 9);
        x.utt_emb = Some(Tensor::zeros([5]));
        let a = m.logits_batch(&[&x]).unwrap();
        let mut m2 = m.clone();
        let w = m2.proj_utt.weight;
        m2.params.get_mut(w).value = m.params.get(w).value.map(|v| v * 7.0 - 1.0);
        assert_eq!(a, m2.logits_batch(&[&x]).unwrap());
    }

    #[test]
    fn both_projections_receive_gradient() {
        let c = cfg();
        let f = FusionConfig { utt_dim: 6, fuse_dim: 8, ..FusionConfig::default() };
        let m = MultiGranularityModel::new(&c, &f, 5).unwrap();
        let xs = [input(&c, 6, 1), input(&c, 6, 2)];
        let mut cx = Ctx::eval(&m.params);
        let rows: Vec<Var> = xs.iter().map(|x| m.logits(&mut cx, x).unwrap()).collect();
        let z = cx.g.concat_rows(&rows).unwrap();
        let l = cx.g.cross_entropy(z, &[0, 2]).unwrap();
        cx.g.backward(l).unwrap();
        let grads = cx.param_grads();
        for id in [m.proj_fine.weight, m.proj_utt.weight] {
            assert!(grads[id.index()].as_ref().unwrap().norm() > 0.0);
        }
    }

    #[test]
    fn freeze_fine_marks_encoder_only() {
        let f = FusionConfig { utt_dim: 6, fuse_dim: 8, freeze_fine: true, ..FusionConfig::default() };
        let m = MultiGranularityModel::new(&cfg(), &f, 5).unwrap();
        for p in m.params.iter() {
            assert_eq!(p.trainable, !p.name.starts_with("fine."), "{}", p.name);
        }
    }

    #[test]
    fn load_fine_copies_encoder() {
        let c = cfg();
        let fine = MultilevelModel::new(&c, 1).unwrap();
        let mut m = MultiGranularityModel::new(&c, &FusionConfig { utt_dim: 4, fuse_dim: 4, ..Default::default() }, 2)
            .unwrap();
        m.load_fine(&fine).unwrap();
        let x = input(&c, 4, 3);
        let a = fine.trace(&x).unwrap().cls;
        let mut cx = Ctx::eval(&m.params);
        let cls = m.encoder.forward(&mut cx, &x).unwrap().cls;
        assert_eq!(cx.g.value(cls).data(), a.data());
    }

    #[test]
    fn gradcheck_through_both_branches() {
        let c = cfg();
        for source in [UttSource::File, UttSource::BuiltIn] {
            let f = FusionConfig { utt_dim: 6, fuse_dim: 5, utt_source: source, freeze_fine: false };
            let m = MultiGranularityModel::new(&c, &f, 11).unwrap();
            let xs = [input(&c, 6, 12), input(&c, 6, 13)];
            let (worst, name) = param_gradcheck(&m, &[&xs[0], &xs[1]], &[3, 1], 2, 1e-5, 14).unwrap();
            assert!(worst < 1e-4, "{source:?}: {worst} in {name}");
        }
    }
}
