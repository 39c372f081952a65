//! Dense matrix kernels shared by forward and backward passes.

/// Row/column strides of a matrix view over a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `[rows × cols]`.
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows × cols]` buffer.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }
}

/// Products smaller than this use the sequential loop, whose summation order
/// is plain left-to-right over the inner dimension.
const BLOCKED_THRESHOLD: usize = 32 * 32 * 32;

/// `c = a·b + beta·c` with `a: [m×k]`, `b: [k×n]`, `c: [m×n]` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n < BLOCKED_THRESHOLD {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * la.rs + p * la.cs] * b[p * lb.rs + j * lb.cs];
                }
                let out = &mut c[i * n + j];
                *out = if beta == 0.0 { acc } else { beta * *out + acc };
            }
        }
        return;
    }
    // SAFETY: the caller guarantees that every strided index addressed by the
    // (m, k, n) extents and the given layouts lies inside `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_path_matches_triple_loop() {
        let (m, k, n) = (37, 41, 29);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 104729) % 89) as f64 / 89.0 - 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), 0.0, &mut c);
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_layout_and_accumulate() {
        // a stored as [k×m], used transposed
        let (m, k, n) = (2, 3, 2);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![1.0; 4];
        gemm(m, k, n, &at, Layout::transposed(m), &b, Layout::row_major(n), 1.0, &mut c);
        assert_eq!(c, vec![5.0, 6.0, 11.0, 12.0]);
    }
}
