use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a [`ParamStore`]. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None`
    /// counts as a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter {} at index {i} ({})",
                        p.name,
                        g.data()[i]
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec()));
        s
    }

    /// Textbook Adam on one scalar.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mhat = self.m / (1.0 - 0.9f64.powi(self.t));
            let vhat = self.v / (1.0 - 0.999f64.powi(self.t));
            x - lr * mhat / (vhat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.update(&mut s, &[Some(Tensor::zeros([2]))]).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() }, &s);
        opt.update(&mut s, &[Some(Tensor::vector(vec![3.0, -0.01, 250.0]))]).unwrap();
        for (v, sign) in s.iter().next().unwrap().value.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * 1e-3).abs() < 1e-8, "{v}");
        }
    }

    #[test]
    fn two_unit_gradient_steps() {
        let mut s = store(&[0.5]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let mut r = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut x = 0.5;
        for _ in 0..2 {
            opt.update(&mut s, &[Some(Tensor::vector(vec![1.0]))]).unwrap();
            x = r.step(x, 1.0, 1e-5);
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], x);
        assert!((x - (0.5 - 2e-5)).abs() < 1e-10);
    }

    #[test]
    fn matches_scalar_reference_over_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = store(&init);
        let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() }, &s);
        let mut refs: Vec<ScalarAdam> = (0..7).map(|_| ScalarAdam { m: 0.0, v: 0.0, t: 0 }).collect();
        let mut xs = init.clone();
        for _ in 0..100 {
            let g: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            opt.update(&mut s, &[Some(Tensor::vector(g.clone()))]).unwrap();
            for i in 0..7 {
                xs[i] = refs[i].step(xs[i], g[i], 1e-2);
            }
        }
        let got = s.iter().next().unwrap().value.data();
        for (a, b) in got.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let err = opt.update(&mut s, &[Some(Tensor::vector(vec![0.0, f64::NAN]))]).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("w") && m.contains("index 1")), "{err}");
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = store(&[1.0]);
        s.add_frozen("f", Tensor::vector(vec![2.0]));
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.update(&mut s, &[Some(Tensor::vector(vec![1.0])), Some(Tensor::vector(vec![1.0]))]).unwrap();
        assert_eq!(s.iter().nth(1).unwrap().value.data(), &[2.0]);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 0.0])), None, Some(Tensor::vector(vec![4.0]))];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = clip_grad_norm(&mut g, 10.0);
        assert!((n - 1.0).abs() < 1e-12);
    }
}
