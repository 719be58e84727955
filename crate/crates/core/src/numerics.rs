//! Dense fp32 kernels shared by the engine.
//!
//! Storage and matrix products are 32-bit. Reductions inside [`layer_norm`]
//! and [`softmax`] accumulate in 64-bit and truncate on output. Every kernel
//! is a pure function of its inputs with a fixed summation order, so repeated
//! calls on the same inputs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copy of the column block `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(Error::Dimension(format!(
                "column block {start}..{} outside {} columns",
                start + width,
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, width, |r, c| {
            self.get(r, start + c)
        }))
    }

    /// Copy of the row block `[start, start + height)`.
    pub fn row_block(&self, start: usize, height: usize) -> Result<Matrix> {
        if start + height > self.rows {
            return Err(Error::Dimension(format!(
                "row block {start}..{} outside {} rows",
                start + height,
                self.rows
            )));
        }
        Matrix::new(
            height,
            self.cols,
            self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strided view used to express transposed operands without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    pub fn transposed(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.cols,
            cols: m.rows,
            row_stride: 1,
            col_stride: m.cols,
        }
    }

    pub fn rows_of(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

/// `out = a · b` where `out` is row-major `a.rows × b.cols`.
pub(crate) fn gemm_into(a: View<'_>, b: View<'_>, out: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.fill(0.0);
        return;
    }
    // A single row against a transposed row-major matrix (the tied
    // unembedding) is a run of contiguous dot products; sgemm would repack
    // the whole of `b` first.
    if a.rows == 1 && a.col_stride == 1 && b.row_stride == 1 {
        let x = &a.data[..a.cols];
        for (j, o) in out.iter_mut().enumerate() {
            let start = j * b.col_stride;
            *o = dot(x, &b.data[start..start + a.cols]);
        }
        return;
    }
    // SAFETY: the views were built from slices whose lengths cover every
    // strided index (checked by construction), and `out` has exactly
    // `a.rows * b.cols` elements laid out row-major.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_into(View::of(a), View::of(b), &mut out.data);
    debug_assert!(out.is_finite());
    Ok(out)
}

/// Row vector times matrix: `x · b`.
pub fn vec_mat(x: &[f32], b: &Matrix) -> Result<Vec<f32>> {
    if x.len() != b.rows {
        return Err(Error::Dimension(format!(
            "vector of length {} cannot multiply {}x{}",
            x.len(),
            b.rows,
            b.cols
        )));
    }
    let mut out = vec![0.0; b.cols];
    gemm_into(View::rows_of(x, 1, x.len()), View::of(b), &mut out);
    Ok(out)
}

/// LayerNorm with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Dimension(format!(
            "layer_norm lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out);
    Ok(out)
}

pub(crate) fn layer_norm_into(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
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
        out[i] = ((x[i] as f64 - mean) * inv * gamma[i] as f64 + beta[i] as f64) as f32;
    }
}

/// Max-subtracted softmax. Entries equal to `-inf` map to exactly 0.
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        // fully masked row; nothing sensible to normalise
        x.fill(0.0);
        return;
    }
    let mut exps = Vec::with_capacity(x.len());
    let mut total = 0.0f64;
    for &v in x.iter() {
        let e = ((v - max) as f64).exp();
        total += e;
        exps.push(e);
    }
    for (o, e) in x.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Softmax probabilities in 64-bit, used where small probabilities matter.
pub fn softmax_f64(x: &[f32]) -> Vec<f64> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = x.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Tanh-approximation GELU as used by GPT-2.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols())
                .map(|k| a.get(r, k) as f64 * b.get(k, c) as f64)
                .sum::<f64>() as f32
        })
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 8, 8);
        let b = random(&mut rng, 8, 8);
        let got = matmul(&a, &b).unwrap();
        assert!(max_abs_diff(got.as_slice(), naive(&a, &b).as_slice()) < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn transposed_view_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 6, 7);
        let mut out = vec![0.0; 5 * 6];
        gemm_into(View::of(&a), View::transposed(&b), &mut out);
        let want = naive(&a, &b.transpose());
        assert!(max_abs_diff(&out, want.as_slice()) < 1e-5);
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let out = layer_norm(&[3.0; 6], &[1.0; 6], &[0.0; 6], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let beta = [0.5, -1.0, 2.0];
        let out = layer_norm(&[1.0, 5.0, -3.0], &[0.0; 3], &beta, 1e-5).unwrap();
        assert_eq!(out, beta);
    }

    #[test]
    fn layer_norm_matches_f64_formula() {
        // mean 2.5, population variance 1.25
        let x = [1.0f32, 2.0, 3.0, 4.0];
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        let denom = (1.25f64 + 1e-5).sqrt();
        for (o, v) in out.iter().zip(x) {
            let want = (v as f64 - 2.5) / denom;
            assert!((*o as f64 - want).abs() < 1e-6);
        }
        assert!((out[0] as f64 - -1.341635476).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_errors() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0], &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.3; 5]);
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-7));
        assert_eq!(softmax(&[0.0, f32::NEG_INFINITY]), vec![1.0, 0.0]);
        // 64-bit reference: e^{k-3} / (e^-2 + e^-1 + 1)
        let p = softmax(&[1.0, 2.0, 3.0]);
        let want = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(100.0) - 100.0).abs() < 1e-4);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu(1.0) as f64 - 0.8411919906082768).abs() < 1e-7);
        assert!(gelu(-10.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_first_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    proptest! {
        #[test]
        fn transpose_of_product(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            let lhs = matmul(&a, &b).unwrap().transpose();
            let rhs = matmul(&b.transpose(), &a.transpose()).unwrap();
            prop_assert!(max_abs_diff(lhs.as_slice(), rhs.as_slice()) < 1e-5);
        }

        #[test]
        fn softmax_is_distribution(xs in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
            let p = softmax(&xs);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn layer_norm_standardises(xs in proptest::collection::vec(-10.0f32..10.0, 8..64)) {
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            prop_assume!(var > 1.0);
            let n = xs.len();
            let out = layer_norm(&xs, &vec![1.0; n], &vec![0.0; n], 1e-5).unwrap();
            let m = out.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let v = out.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-4);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
