//! The multilevel audio + text classifier.

pub mod checkpoint;
mod config;
pub mod frontend;
mod multilevel;

pub use config::{CombineMode, ModelConfig};
pub use multilevel::{EncoderOutput, ForwardTrace, ModelInput, MultilevelEncoder, MultilevelModel};

use crate::error::Result;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tensor, Var};

/// Anything that maps one utterance to a `[1×K]` logit row.
pub trait Classifier: Send + Sync {
    fn kind(&self) -> &'static str;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, cx: &mut Ctx, input: &ModelInput) -> Result<Var>;

    /// Model-specific settings stored next to the [`ModelConfig`] in checkpoints.
    fn extra_config(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    fn checkpoint_header(&self) -> Result<checkpoint::CheckpointHeader> {
        Ok(checkpoint::CheckpointHeader {
            kind: self.kind().to_string(),
            model: serde_json::to_value(self.config())?,
            extra: self.extra_config(),
        })
    }

    /// Class probabilities in eval mode.
    fn predict(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut cx = Ctx::eval(self.params());
        let z = self.logits(&mut cx, input)?;
        let p = cx.g.softmax(z)?;
        Ok(cx.g.value(p).data().to_vec())
    }

    /// Eval-mode logits for several utterances, `[N×K]`.
    fn logits_batch(&self, inputs: &[&ModelInput]) -> Result<Tensor> {
        let mut cx = Ctx::eval(self.params());
        let rows = inputs.iter().map(|x| self.logits(&mut cx, x)).collect::<Result<Vec<_>>>()?;
        let z = cx.g.concat_rows(&rows)?;
        Ok(cx.g.value(z).clone())
    }
}

/// Mean cross-entropy of a batch under the parameter values in `store`.
pub fn batch_loss(model: &dyn Classifier, store: &ParamStore, inputs: &[&ModelInput], labels: &[usize]) -> Result<f64> {
    let mut cx = Ctx::eval(store);
    let rows = inputs.iter().map(|x| model.logits(&mut cx, x)).collect::<Result<Vec<_>>>()?;
    let z = cx.g.concat_rows(&rows)?;
    let l = cx.g.cross_entropy(z, labels)?;
    Ok(cx.g.value(l).item())
}

/// Finite-difference check of the batch loss gradient with respect to the
/// trainable parameters. `per_param` random coordinates of every tensor are
/// checked (all of them when the tensor is smaller). Returns the worst
/// relative error and the name of the parameter where it occurred.
pub fn param_gradcheck(
    model: &dyn Classifier,
    inputs: &[&ModelInput],
    labels: &[usize],
    per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<(f64, String)> {
    use rand::seq::index::sample;
    use rand::SeedableRng;

    let store = model.params();
    let mut cx = Ctx::eval(store);
    let rows = inputs.iter().map(|x| model.logits(&mut cx, x)).collect::<Result<Vec<_>>>()?;
    let z = cx.g.concat_rows(&rows)?;
    let l = cx.g.cross_entropy(z, labels)?;
    cx.g.backward(l)?;
    let grads = cx.param_grads();
    drop(cx);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    for (pi, (param, grad)) in store.iter().zip(&grads).enumerate() {
        if !param.trainable {
            continue;
        }
        let n = param.value.len();
        let zero = Tensor::zeros(param.value.shape().to_vec());
        let grad = grad.as_ref().unwrap_or(&zero);
        for j in sample(&mut rng, n, per_param.min(n)) {
            let id = store.id(pi);
            let orig = param.value.data()[j];
            let cell = |s: &mut ParamStore, v: f64| s.get_mut(id).value.data_mut()[j] = v;
            cell(&mut probe, orig + eps);
            let up = batch_loss(model, &probe, inputs, labels)?;
            cell(&mut probe, orig - eps);
            let down = batch_loss(model, &probe, inputs, labels)?;
            cell(&mut probe, orig);
            let err = crate::tensor::relative_error(grad.data()[j], (up - down) / (2.0 * eps));
            if err > worst.0 {
                worst = (err, param.name.clone());
            }
        }
    }
    Ok(worst)
}
