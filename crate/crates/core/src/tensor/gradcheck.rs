//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Denominator floor of [`relative_error`]. Central differences at
/// `eps = 1e-5` resolve gradients only to about `ulp(f) / eps ≈ 1e-11`, so
/// gradients that vanish analytically are compared on this absolute scale.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Compares the gradient of the scalar function `f` at `x` against central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` and returns the maximum relative
/// error over all coordinates.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Names of the ops covered by [`op_suite`], in case order.
pub const OP_NAMES: [&str; 25] = [
    "matmul",
    "matmul_t",
    "transpose",
    "softmax",
    "layer_norm",
    "conv1d_same",
    "conv1d_valid",
    "max_pool_time",
    "tanh",
    "sigmoid",
    "relu",
    "cross_entropy",
    "add_bias",
    "slice_concat_cols",
    "select_concat_rows",
    "mul_sub",
    "add",
    "scale_affine",
    "row_scale",
    "elem_scale",
    "masked_softmax",
    "segment_max",
    "gather",
    "mean_reshape",
    "matmul_large",
];

/// Scalar test function for op `op` applied to `x`. `aux` holds two fixed
/// random tensors of at least 256 values used as weights.
pub fn op_case(op: usize, g: &mut Graph, x: Var, aux: &[Tensor]) -> Result<Var> {
    let (r, c) = g.value(x).matrix_dims()?;
    let weights = |g: &mut Graph, shape: &[usize]| -> Result<Var> {
        let n: usize = shape.iter().product();
        Ok(g.constant(Tensor::new(shape.to_vec(), aux[0].data().iter().cycle().take(n).copied().collect())?))
    };
    let y = match op {
        0 => {
            let b = weights(g, &[c, 3])?;
            g.matmul(x, b)?
        }
        1 => {
            let b = weights(g, &[2, c])?;
            g.matmul_t(x, b)?
        }
        2 => g.transpose(x)?,
        3 => g.softmax(x)?,
        4 => {
            let gain = weights(g, &[c])?;
            let bias = g.constant(Tensor::full([c], 0.3));
            g.layer_norm(x, gain, bias, 1e-5)?
        }
        5 => {
            let k = weights(g, &[2, c, 3])?;
            g.conv1d(x, k, Padding::Same)?
        }
        6 => {
            let k = weights(g, &[1, c, 2])?;
            g.conv1d(x, k, Padding::Valid)?
        }
        7 => g.max_pool_time(x)?,
        8 => g.tanh(x),
        9 => g.sigmoid(x),
        10 => {
            // shift away from the kink so central differences are well-defined
            let shifted = g.affine_scalar(x, 1.0, 0.05);
            g.relu(shifted)
        }
        11 => {
            if c < 2 {
                g.sum(x)
            } else {
                let labels: Vec<usize> = (0..r).map(|i| i % c).collect();
                return g.cross_entropy(x, &labels);
            }
        }
        12 => {
            let b = weights(g, &[c])?;
            g.add_bias(x, b)?
        }
        13 => {
            let s = g.slice_cols(x, 0, c.div_ceil(2))?;
            g.concat_cols(&[s, x])?
        }
        14 => {
            let first = g.select_rows(x, &[0])?;
            g.concat_rows(&[x, first])?
        }
        15 => {
            let sq = g.mul(x, x)?;
            g.sub(sq, x)?
        }
        16 => {
            let t = g.tanh(x);
            g.add(x, t)?
        }
        17 => {
            let s = g.scale(x, -1.7);
            g.affine_scalar(s, 0.5, 2.0)
        }
        18 => {
            let scales: Vec<f64> = (0..r).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 + i as f64 }).collect();
            g.row_scale(x, &scales)?
        }
        19 => g.elem_scale(x, aux[0].data().iter().cycle().take(r * c).copied().collect())?,
        20 => {
            let keep: Vec<bool> = (0..c).map(|j| j == 0 || j % 2 == 1).collect();
            g.masked_softmax(x, Some(&keep))?
        }
        21 => {
            let segments = if r > 1 { vec![(0, 1), (1, r - 1)] } else { vec![(0, 1)] };
            g.segment_max(x, &segments)?
        }
        22 => {
            let ids: Vec<Option<usize>> = (0..r + 2).map(|i| (i % 3 != 1).then_some(i % r)).collect();
            g.gather(x, &ids)?
        }
        23 => {
            let flat = g.reshape(x, vec![1, r * c])?;
            let sq = g.mul(flat, flat)?;
            let m = g.mean(sq);
            let m = g.reshape(m, vec![1, 1])?;
            g.matmul(m, flat)?
        }
        24 => {
            // large enough to take the blocked multiply path
            let xx = g.concat_rows(&vec![x; 40])?;
            let b = weights(g, &[c, 40])?;
            let h = g.matmul(xx, b)?;
            let t = weights(g, &[40, 40])?;
            let h = g.matmul(h, t)?;
            let h = g.matmul_t(h, t)?;
            let ht = g.transpose(h)?;
            let p = g.matmul(ht, h)?;
            let p = g.scale(p, 1e-4);
            g.tanh(p)
        }
        _ => return Err(crate::Error::validation(format!("no op case {op}"))),
    };
    // weight the outputs so the loss is not symmetric in them
    let n = g.value(y).len();
    let wdata: Vec<f64> = aux[1].data().iter().cycle().take(n).copied().collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), wdata)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Runs [`gradcheck`] for every op in [`OP_NAMES`] on a random `3×4` input
/// and returns the worst relative error per op.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut random = |n: usize| -> Result<Tensor> {
        Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let aux = [random(4096)?, random(256)?];
    let x = random(12)?.reshape([3, 4])?;
    OP_NAMES
        .iter()
        .enumerate()
        .map(|(op, name)| Ok((name.to_string(), gradcheck(|g, x| op_case(op, g, x, &aux), &x, eps)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new([2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
        let w = Tensor::new([3, 2], vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let w = g.constant(w.clone());
                let y = g.matmul(x, w)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
