use crate::error::{Error, Result};
use crate::model::config::{CombineMode, ModelConfig};
use crate::model::frontend::{combine, EncoderPrenet, Highway, MelPrenet, PhonemeCnn};
use crate::model::Classifier;
use crate::nn::{add_positions, check_mask, CrossBlock, Ctx, EncoderBlock, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// One utterance ready for the model. Padding, if any, is trailing: the
/// `*_keep` masks are a run of `true` followed by a run of `false`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `[(T'+1) × mel_dim]`, dummy row first.
    pub mel: Tensor,
    pub mel_keep: Vec<bool>,
    /// `[T × word_dim]` frozen word vectors.
    pub word_vecs: Tensor,
    /// Rows of the trainable word table, one per real word.
    pub word_ids: Vec<usize>,
    /// Phoneme ids of each real word.
    pub phonemes: Vec<Vec<u32>>,
    pub word_keep: Vec<bool>,
    /// Pre-computed utterance-level embedding for the multi-granularity model.
    pub utt_emb: Option<Tensor>,
}

impl ModelInput {
    pub fn new(mel: Tensor, word_vecs: Tensor, word_ids: Vec<usize>, phonemes: Vec<Vec<u32>>) -> Self {
        let mel_keep = vec![true; mel.rows()];
        let word_keep = vec![true; word_vecs.rows()];
        ModelInput { mel, mel_keep, word_vecs, word_ids, phonemes, word_keep, utt_emb: None }
    }

    pub fn num_frames(&self) -> usize {
        self.mel_keep.iter().filter(|&&k| k).count()
    }

    pub fn num_words(&self) -> usize {
        self.word_keep.iter().filter(|&&k| k).count()
    }

    /// Appends masked zero frames and words up to the given lengths.
    pub fn padded(&self, frames: usize, words: usize) -> Result<ModelInput> {
        let pad = |t: &Tensor, rows: usize| -> Result<Tensor> {
            if rows < t.rows() {
                return Err(Error::dim(format!("cannot pad {} rows down to {rows}", t.rows())));
            }
            let mut data = t.data().to_vec();
            data.resize(rows * t.cols(), 0.0);
            Tensor::new(vec![rows, t.cols()], data)
        };
        let mut out = self.clone();
        out.mel = pad(&self.mel, frames)?;
        out.mel_keep.resize(frames, false);
        out.word_vecs = pad(&self.word_vecs, words)?;
        out.word_keep.resize(words, false);
        Ok(out)
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (frames, mel_dim) = self.mel.matrix_dims()?;
        let (words, word_dim) = self.word_vecs.matrix_dims()?;
        if mel_dim != cfg.mel_dim || word_dim != cfg.word_dim {
            return Err(Error::dim(format!(
                "input widths mel {mel_dim} / words {word_dim}, model expects {} / {}",
                cfg.mel_dim, cfg.word_dim
            )));
        }
        check_mask(frames, Some(&self.mel_keep), "mel frames")?;
        check_mask(words, Some(&self.word_keep), "words")?;
        for (what, keep) in [("mel", &self.mel_keep), ("word", &self.word_keep)] {
            let real = keep.iter().take_while(|&&k| k).count();
            if real == 0 || keep[real..].iter().any(|&k| k) {
                return Err(Error::validation(format!("{what} mask must be non-empty trailing padding")));
            }
        }
        if self.phonemes.len() != self.num_words() {
            return Err(Error::dim(format!(
                "{} phoneme lists for {} words",
                self.phonemes.len(),
                self.num_words()
            )));
        }
        if cfg.word_table_rows > 0 && self.word_ids.len() != self.num_words() {
            return Err(Error::dim(format!("{} word ids for {} words", self.word_ids.len(), self.num_words())));
        }
        Ok(())
    }
}

/// Graph handles for every intermediate the model exposes.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub text_enc_out: Var,
    pub cross_out: Var,
    pub fusion_out: Var,
    /// `[1×D]`, first row of `fusion_out`.
    pub cls: Var,
    pub attention: Vec<Var>,
}

/// Concrete values of one eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub text_enc_out: Tensor,
    pub cross_out: Tensor,
    pub fusion_out: Tensor,
    pub cls: Tensor,
    pub logits: Tensor,
    pub attention: Vec<Tensor>,
}

fn mask_or_none(keep: &[bool]) -> Option<&[bool]> {
    (!keep.iter().all(|&k| k)).then_some(keep)
}

fn keep_scale(keep: &[bool]) -> Vec<f64> {
    keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
}

/// Text encoder, mel pre-net, cross-modality stack and deep fusion stack.
#[derive(Clone, Debug)]
pub struct MultilevelEncoder {
    pub cfg: ModelConfig,
    pub phoneme_cnn: PhonemeCnn,
    pub highway: Option<Highway>,
    pub prenet: EncoderPrenet,
    pub mel_prenet: MelPrenet,
    pub text_blocks: Vec<EncoderBlock>,
    pub cross_blocks: Vec<CrossBlock>,
    pub fusion_blocks: Vec<EncoderBlock>,
    pub word_table: Option<ParamId>,
}

impl MultilevelEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let word_table = (cfg.word_table_rows > 0)
            .then(|| store.add(format!("{prefix}word_table"), init.normal(&[cfg.word_table_rows, cfg.word_dim], 0.4)));
        let phoneme_cnn = PhonemeCnn::new(store, init, &format!("{prefix}phoneme_cnn"), cfg);
        let highway = (cfg.combine_mode == CombineMode::Highway).then(|| {
            Highway::new(
                store,
                init,
                &format!("{prefix}highway"),
                cfg.combined_dim(),
                cfg.highway_layers,
                cfg.highway_gate_bias,
            )
        });
        let prenet = EncoderPrenet::new(store, init, &format!("{prefix}encoder_prenet"), cfg);
        let mel_prenet = MelPrenet::new(store, init, &format!("{prefix}mel_prenet"), cfg);
        let text_blocks = (0..cfg.layers_text)
            .map(|i| EncoderBlock::new(store, init, &format!("{prefix}text.{i}"), d, cfg.heads, cfg.ff_dim))
            .collect();
        let cross_blocks = (0..cfg.layers_cross)
            .map(|i| CrossBlock::new(store, init, &format!("{prefix}cross.{i}"), d, cfg.heads, cfg.ff_dim))
            .collect();
        let fusion_blocks = (0..cfg.layers_fusion)
            .map(|i| EncoderBlock::new(store, init, &format!("{prefix}fusion.{i}"), d, cfg.heads, cfg.ff_dim))
            .collect();
        Ok(MultilevelEncoder {
            cfg: cfg.clone(),
            phoneme_cnn,
            highway,
            prenet,
            mel_prenet,
            text_blocks,
            cross_blocks,
            fusion_blocks,
            word_table,
        })
    }

    /// Fused word + phoneme rows `[T×U]`, pad rows zero.
    pub fn text_features(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var> {
        let real = input.num_words();
        let total = input.word_keep.len();
        let mut phon = self.phoneme_cnn.forward_words(cx, &input.phonemes)?;
        if total > real {
            let pad = cx.g.constant(Tensor::zeros([total - real, self.cfg.phoneme_channels]));
            phon = cx.g.concat_rows(&[phon, pad])?;
        }
        let words = match self.word_table {
            Some(table) => {
                let ids: Vec<Option<usize>> = (0..total).map(|i| input.word_ids.get(i).copied()).collect();
                let t = cx.param(table);
                cx.g.gather(t, &ids)?
            }
            None => cx.g.constant(input.word_vecs.clone()),
        };
        let u = combine(cx, words, phon, self.cfg.combine_mode, self.highway.as_ref())?;
        match mask_or_none(&input.word_keep) {
            Some(keep) => cx.g.row_scale(u, &keep_scale(keep)),
            None => Ok(u),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, input: &ModelInput) -> Result<EncoderOutput> {
        input.validate(&self.cfg)?;
        let word_keep = mask_or_none(&input.word_keep);
        let mel_keep = mask_or_none(&input.mel_keep);
        let mut attention = Vec::new();

        let u = self.text_features(cx, input)?;
        let scale = word_keep.map(keep_scale);
        let x = self.prenet.forward(cx, u, scale.as_deref())?;
        let mut text = add_positions(cx, x)?;
        for block in &self.text_blocks {
            text = block.forward(cx, text, word_keep, &mut attention)?;
        }

        let mel = cx.g.constant(input.mel.clone());
        let m = self.mel_prenet.forward(cx, mel)?;
        let mut cross = add_positions(cx, m)?;
        let mut cross_log = Vec::new();
        for block in &self.cross_blocks {
            cross = block.forward(cx, cross, mel_keep, text, word_keep, &mut attention, &mut cross_log)?;
        }
        attention.extend(cross_log);

        let mut fused = cross;
        for block in &self.fusion_blocks {
            fused = block.forward(cx, fused, mel_keep, &mut attention)?;
        }
        let cls = cx.g.select_rows(fused, &[0])?;
        Ok(EncoderOutput { text_enc_out: text, cross_out: cross, fusion_out: fused, cls, attention })
    }
}

/// The fine-grained classifier: encoder plus an affine head on the first
/// fused vector.
#[derive(Clone, Debug)]
pub struct MultilevelModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: MultilevelEncoder,
    pub head: Linear,
}

impl MultilevelModel {
    pub const KIND: &'static str = "multilevel";

    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder = MultilevelEncoder::new(&mut params, &mut init, "", cfg)?;
        let head = Linear::with_bias_value(&mut params, &mut init, "head", cfg.d_model, cfg.num_classes, 0.0);
        Ok(MultilevelModel { cfg: cfg.clone(), params, encoder, head })
    }

    pub fn trace(&self, input: &ModelInput) -> Result<ForwardTrace> {
        let mut cx = Ctx::eval(&self.params);
        let out = self.encoder.forward(&mut cx, input)?;
        let logits = self.head.forward(&mut cx, out.cls)?;
        let v = |x: Var| cx.g.value(x).clone();
        Ok(ForwardTrace {
            text_enc_out: v(out.text_enc_out),
            cross_out: v(out.cross_out),
            fusion_out: v(out.fusion_out),
            cls: v(out.cls).reshape([self.cfg.d_model])?,
            logits: v(logits).reshape([self.cfg.num_classes])?,
            attention: out.attention.iter().map(|&a| v(a)).collect(),
        })
    }

    /// Applies the classification head to a given fusion output `[(T'+1)×D]`.
    pub fn classify_fused(&self, fusion_out: &Tensor) -> Result<Tensor> {
        let mut cx = Ctx::eval(&self.params);
        let f = cx.g.constant(fusion_out.clone());
        let cls = cx.g.select_rows(f, &[0])?;
        let z = self.head.forward(&mut cx, cls)?;
        cx.g.value(z).reshape([self.cfg.num_classes])
    }
}

impl Classifier for MultilevelModel {
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

    fn logits(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var> {
        let out = self.encoder.forward(cx, input)?;
        self.head.forward(cx, out.cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MultiHeadAttention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_input(cfg: &ModelConfig, frames: usize, words: usize, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mel: Vec<f64> = (0..frames * cfg.mel_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        mel[..cfg.mel_dim].iter_mut().for_each(|x| *x = 0.0);
        let vecs = (0..words * cfg.word_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let phonemes = (0..words)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(2..41)).collect())
            .collect();
        ModelInput::new(
            Tensor::new(vec![frames, cfg.mel_dim], mel).unwrap(),
            Tensor::new(vec![words, cfg.word_dim], vecs).unwrap(),
            (0..words).collect(),
            phonemes,
        )
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { word_dim: 12, mel_dim: 10, ..ModelConfig::tiny() }
    }

    #[test]
    fn trace_shapes_and_cls() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 1).unwrap();
        let t = m.trace(&random_input(&cfg, 7, 3, 2)).unwrap();
        assert_eq!(t.text_enc_out.shape(), &[3, 16]);
        assert_eq!(t.cross_out.shape(), &[7, 16]);
        assert_eq!(t.fusion_out.shape(), &[7, 16]);
        assert_eq!(t.cls.data(), t.fusion_out.row(0));
        assert_eq!(t.logits.shape(), &[4]);
        for a in &t.attention {
            for i in 0..a.rows() {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(a.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn padding_does_not_change_logits() {
        for mode in [CombineMode::Highway, CombineMode::Concat] {
            let cfg = ModelConfig { combine_mode: mode, ..small_cfg() };
            let m = MultilevelModel::new(&cfg, 3).unwrap();
            let x = random_input(&cfg, 9, 4, 4);
            let a = m.trace(&x).unwrap().logits;
            let b = m.trace(&x.padded(14, 7).unwrap()).unwrap().logits;
            assert!(a.max_abs_diff(&b) < 1e-5, "{mode:?}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn single_word_self_attention_is_one() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 5).unwrap();
        let t = m.trace(&random_input(&cfg, 5, 1, 6)).unwrap();
        for a in &t.attention[..cfg.heads * cfg.layers_text] {
            assert_eq!(a.shape(), &[1, 1]);
            assert_eq!(a.item(), 1.0);
        }
    }

    #[test]
    fn attention_over_one_key_is_affine_in_that_key() {
        let mut store = ParamStore::new();
        let mut init = Init::new(8);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q: Vec<f64> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cx = Ctx::eval(&store);
        let qv = cx.g.constant(Tensor::new(vec![5, 8], q).unwrap());
        let kv = cx.g.constant(Tensor::new(vec![1, 8], k.clone()).unwrap());
        let out = mha.forward(&mut cx, qv, kv, None).unwrap();
        let got = cx.g.value(out.output).clone();

        let affine = |x: &[f64], l: &Linear| -> Vec<f64> {
            let w = store.get(l.weight).value.clone();
            let b = store.get(l.bias.unwrap()).value.clone();
            (0..l.d_out)
                .map(|j| b.data()[j] + (0..l.d_in).map(|i| x[i] * w.at(i, j)).sum::<f64>())
                .collect()
        };
        let expected = affine(&affine(&k, &mha.value), &mha.out);
        for i in 0..5 {
            for j in 0..8 {
                assert!((got.at(i, j) - expected[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mel_prenet_is_zero_for_zero_input_and_bias() {
        let cfg = small_cfg();
        let mut m = MultilevelModel::new(&cfg, 10).unwrap();
        for name in ["mel_prenet.fc0.bias", "mel_prenet.fc1.bias"] {
            let id = m.params.find(name).unwrap();
            m.params.get_mut(id).value = Tensor::zeros([m.params.get(id).value.len()]);
        }
        let mut cx = Ctx::eval(&m.params);
        let x = cx.g.constant(Tensor::zeros([4, cfg.mel_dim]));
        let y = m.encoder.mel_prenet.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.shape(y), &[4, cfg.d_model]);
        assert!(cx.g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_reads_only_first_position() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 11).unwrap();
        let t = m.trace(&random_input(&cfg, 6, 2, 12)).unwrap();
        let mut altered = t.fusion_out.clone();
        for i in 1..altered.rows() {
            altered.row_mut(i).iter_mut().for_each(|v| *v = 123.0);
        }
        assert_eq!(m.classify_fused(&altered).unwrap(), t.logits);
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 13).unwrap();
        let x = random_input(&cfg, 6, 3, 14);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [
            ModelConfig::default(),
            small_cfg(),
            ModelConfig { combine_mode: CombineMode::Concat, layers_fusion: 3, ..small_cfg() },
            ModelConfig { word_table_rows: 5, layers_text: 2, layers_cross: 2, ..small_cfg() },
        ] {
            let m = MultilevelModel::new(&cfg, 0).unwrap();
            assert_eq!(m.params.numel(), cfg.num_params(), "{cfg:?}");
        }
    }

    #[test]
    fn rejects_mask_length_mismatch() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 0).unwrap();
        let mut x = random_input(&cfg, 5, 2, 1);
        x.mel_keep.push(false);
        assert!(matches!(m.trace(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn word_table_gradients_reach_used_rows_only() {
        let cfg = ModelConfig { word_table_rows: 6, ..small_cfg() };
        let m = MultilevelModel::new(&cfg, 2).unwrap();
        let mut x = random_input(&cfg, 5, 2, 3);
        x.word_ids = vec![4, 1];
        let mut cx = Ctx::eval(&m.params);
        let z = m.logits(&mut cx, &x).unwrap();
        let loss = cx.g.cross_entropy(z, &[2]).unwrap();
        cx.g.backward(loss).unwrap();
        let grads = cx.param_grads();
        let g = grads[m.encoder.word_table.unwrap().index()].as_ref().unwrap();
        for r in 0..6 {
            let nz = g.row(r).iter().any(|&v| v != 0.0);
            assert_eq!(nz, r == 4 || r == 1, "row {r}");
        }
    }

    #[test]
    fn untrained_output_is_near_uniform_on_average() {
        let cfg = ModelConfig { word_dim: 12, mel_dim: 10, ..ModelConfig::default() };
        let mut mean = [0.0; 4];
        for s in 0..100 {
            let m = MultilevelModel::new(&cfg, 1000 + s).unwrap();
            let p = m.predict(&random_input(&cfg, 4, 2, 5000 + s)).unwrap();
            mean.iter_mut().zip(&p).for_each(|(a, b)| *a += b / 100.0);
        }
        for p in mean {
            assert!((p - 0.25).abs() < 0.05, "{mean:?}");
        }
    }

    #[test]
    fn batch_gradcheck_on_sampled_coordinates() {
        let cfg = small_cfg();
        let m = MultilevelModel::new(&cfg, 21).unwrap();
        let xs = [random_input(&cfg, 5, 2, 22), random_input(&cfg, 4, 3, 23)];
        let (worst, name) = crate::model::param_gradcheck(&m, &[&xs[0], &xs[1]], &[1, 3], 2, 1e-5, 24).unwrap();
        assert!(worst < 1e-4, "worst relative error {worst} in {name}");
    }
}
