//! Dense f32 helpers used by the forward pass and the analyses.
//!
//! Matrices are row-major. Products go through `matrixmultiply::sgemm`, which
//! is single-threaded and deterministic; reductions that feed normalisation
//! (LayerNorm statistics, softmax, dot products) accumulate in f64.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            &self.data,
            self.rows,
            self.cols,
            self.cols,
            &other.data,
            other.cols,
            other.cols,
            &mut out.data,
        );
        out
    }

    /// `v · self` for a row vector `v` (length == rows).
    pub fn vec_mul(&self, v: &[f32]) -> Vec<f32> {
        assert_eq!(v.len(), self.rows, "vec_mul dimension");
        let mut out = vec![0.0f32; self.cols];
        gemm(
            v, 1, self.rows, self.rows, &self.data, self.cols, self.cols, &mut out,
        );
        out
    }

    /// `self · v` for a column vector `v` (length == cols).
    pub fn mul_vec(&self, v: &[f32]) -> Vec<f32> {
        assert_eq!(v.len(), self.cols, "mul_vec dimension");
        (0..self.rows).map(|r| dot(self.row(r), v) as f32).collect()
    }
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_transposed inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: a is m×k row-major, b is n×k row-major read as k×n with
    // row stride 1 and column stride k; out is m×n and exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `C[m×n] = A[m×k] · B[k×n]` where A and B may be column windows of wider
/// row-major buffers (`lda`, `ldb` are their row strides).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f32],
    m: usize,
    k: usize,
    lda: usize,
    b: &[f32],
    n: usize,
    ldb: usize,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k);
    assert!(b.len() >= (k - 1) * ldb + n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides; c is exclusively borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            lda as isize,
            1,
            b.as_ptr(),
            ldb as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f32], s: f32) -> Vec<f32> {
    a.iter().map(|x| x * s).collect()
}

#[inline]
pub fn add_assign(acc: &mut [f32], v: &[f32]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

#[inline]
pub fn sub_assign(acc: &mut [f32], v: &[f32]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a -= x;
    }
}

/// `acc += s * v`
#[inline]
pub fn axpy(acc: &mut [f32], s: f32, v: &[f32]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Element-wise mean of equally sized vectors, accumulated in f64.
pub fn mean_of<'a, I>(vectors: I) -> Option<Vec<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        assert_eq!(v.len(), acc.len(), "mean_of: ragged vectors");
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// LayerNorm with f64 statistics: `γ ⊙ (x − μ)/√(σ² + ε) + β`.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out);
    out
}

pub fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for i in 0..x.len() {
        out[i] = (((x[i] as f64 - mean) * inv) as f32) * gamma[i] + beta[i];
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Softmax in f64, returned as f64 so callers can sum without loss.
pub fn softmax64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut out: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// In-place softmax over a slice of f32, with f64 accumulation.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut z = 0.0f64;
    for v in x.iter_mut() {
        let e = (*v as f64 - max).exp();
        z += e;
        *v = e as f32;
    }
    let inv = 1.0 / z;
    for v in x.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0f64;
                for k in 0..a.cols {
                    s += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.data[i * b.cols + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|i| i as f32 * 0.5 - 2.0).collect());
        let b = Matrix::from_vec(4, 5, (0..20).map(|i| (i as f32).sin()).collect());
        let fast = a.matmul(&b);
        let slow = naive_matmul(&a, &b);
        assert!(max_abs_diff(&fast.data, &slow.data) < 1e-5);
        let v = a.row(1).to_vec();
        let vm = b.vec_mul(&v);
        assert!(max_abs_diff(&vm, fast.row(1)) < 1e-5);
        let bt = b.transpose();
        assert!(max_abs_diff(&bt.mul_vec(&v), fast.row(1)) < 1e-5);
        let via_t = matmul_transposed(&a, &bt);
        assert!(max_abs_diff(&via_t.data, &slow.data) < 1e-5);
    }

    #[test]
    fn layer_norm_is_shift_invariant() {
        let x = [1.0, 2.0, 4.0, -3.0];
        let g = [1.0, 0.5, 2.0, 1.0];
        let b = [0.1, 0.0, -0.2, 0.3];
        let y1 = layer_norm(&x, &g, &b, 1e-5);
        let shifted: Vec<f32> = x.iter().map(|v| v + 7.5).collect();
        let y2 = layer_norm(&shifted, &g, &b, 1e-5);
        assert!(max_abs_diff(&y1, &y2) < 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        // 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3))) evaluated in f64
        let r = |x: f64| {
            0.5 * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        for x in [-3.0f32, -1.0, -0.1, 0.0, 0.5, 2.0, 5.0] {
            assert!((gelu(x) as f64 - r(x as f64)).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax64(&[1000.0, 1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut q = [3.0f32, -1.0, 0.5];
        softmax_in_place(&mut q);
        assert!((q.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pearson_of_proportional_series_is_one() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&xs, &[1.0; 10]).is_none());
    }
}
