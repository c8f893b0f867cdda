//! Minimal dense numeric kernel: row-major matrices, row softmax, layer
//! normalization, SiLU, and a seeded RNG.
//!
//! Values are stored as `f32`; every reduction accumulates in `f64`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, VitiError};

/// Dense row-major matrix of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a flat row-major buffer. Fails if the length is off.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(VitiError::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix with entries drawn i.i.d. from N(0, std^2).
    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutably borrow row `i`.
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a * b` with f64 accumulation.
///
/// The inner loop runs over rows of `b` so both operands stream in row-major
/// order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(VitiError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = a.row(i);
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let brow = b.row(k);
            for (j, &bkj) in brow.iter().enumerate() {
                acc[j] += aik * bkj as f64;
            }
        }
        let orow = out.row_mut(i);
        for (j, &v) in acc.iter().enumerate() {
            orow[j] = v as f32;
        }
    }
    Ok(out)
}

/// Row-vector times matrix: `x * m`, f64 accumulation.
pub fn vecmat(x: &[f32], m: &Matrix) -> Result<Vec<f32>> {
    if x.len() != m.rows {
        return Err(VitiError::Shape(format!(
            "vecmat len {} by {}x{}",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut acc = vec![0.0f64; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let xk = xk as f64;
        let mrow = m.row(k);
        for (j, &mkj) in mrow.iter().enumerate() {
            acc[j] += xk * mkj as f64;
        }
    }
    Ok(acc.iter().map(|&v| v as f32).collect())
}

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Euclidean norm.
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax over each row (max subtraction, f64 sums).
///
/// Rejects NaN input; `-inf` entries are allowed and map to weight 0.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        softmax_into(row, out.row_mut(i))?;
    }
    Ok(out)
}

/// Softmax of `row` written into `out`. Shared by [`softmax_rows`] and the
/// per-position attention path.
pub fn softmax_into(row: &[f32], out: &mut [f32]) -> Result<()> {
    if row.iter().any(|v| v.is_nan()) {
        return Err(VitiError::Numeric("NaN input to softmax".into()));
    }
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if mx == f32::NEG_INFINITY {
        return Err(VitiError::Numeric("softmax row is all -inf".into()));
    }
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = ((v - mx) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
    Ok(())
}

/// Layer normalization with learned gain and bias.
///
/// Normalizes `x` to zero mean and unit variance (up to `eps`), then applies
/// the elementwise affine.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(VitiError::Shape(format!(
            "layer_norm lengths {}/{}/{}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean: f64 = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = x
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(&v, (&g, &b))| (((v as f64 - mean) * inv) as f32) * g + b)
        .collect())
}

/// Elementwise SiLU: `x * sigmoid(x)`.
pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Logistic sigmoid in f32.
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

/// Logistic sigmoid in f64.
pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic seeded RNG (ChaCha8).
///
/// The same seed always yields the same stream on every platform. Worker
/// streams are derived from (seed, stream index) so sample-parallel stages
/// stay reproducible regardless of scheduling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for (seed, index) pairs, e.g. one per sample.
    pub fn derive(seed: u64, index: u64) -> Self {
        // splitmix64 hash of the pair
        let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Rng::new(z ^ (z >> 31))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f32 {
        let v: f64 = self.inner.sample(StandardNormal);
        v as f32
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in [lo, hi).
    pub fn below(&mut self, lo: u64, hi: u64) -> u64 {
        self.inner.gen_range(lo..hi)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(0, (i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from [0, n).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = matmul(&Matrix::identity(2), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_oracle() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let m = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.5, 4.0]).unwrap();
        let out = matmul(&Matrix::zeros(2, 2), &m).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(VitiError::Shape(_))));
    }

    #[test]
    fn softmax_symmetry() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let out = softmax_rows(&m).unwrap();
        assert_relative_eq!(out.get(0, 0), 0.5, max_relative = 1e-6);
        assert_relative_eq!(out.get(0, 1), 0.5, max_relative = 1e-6);
    }

    #[test]
    fn softmax_exp_normalize_oracle() {
        // exp-normalize computed at high precision: softmax([1,2,3])
        let m = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = softmax_rows(&m).unwrap();
        let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (got, want) in out.data().iter().zip(expect.iter()) {
            assert_relative_eq!(*got, *want, max_relative = 1e-5);
        }
    }

    #[test]
    fn softmax_stability_limit() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let out = softmax_rows(&m).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(out.get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_vec(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(VitiError::Numeric(_))));
    }

    #[test]
    fn layer_norm_constant_input() {
        let x = [3.0; 5];
        let out = layer_norm(&x, &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn layer_norm_already_normalized() {
        // [1,-1] has mean 0 and population variance 1 already
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert_relative_eq!(out[0], 1.0, max_relative = 1e-5);
        assert_relative_eq!(out[1], -1.0, max_relative = 1e-5);
    }

    #[test]
    fn layer_norm_affine_collapse() {
        let x = [5.0, -2.0, 0.25];
        let out = layer_norm(&x, &[0.0; 3], &[7.0; 3], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(&[0.0])[0], 0.0);
        assert_relative_eq!(silu(&[1.0])[0], 0.731_058_6, max_relative = 1e-5);
        // asymptote: silu(x) ~= x for large positive x
        assert_relative_eq!(silu(&[30.0])[0], 30.0, max_relative = 1e-6);
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal(), b.normal());
            assert_eq!(a.below(0, 1000), b.below(0, 1000));
        }
    }

    #[test]
    fn rng_derived_streams_differ() {
        let mut a = Rng::derive(42, 0);
        let mut b = Rng::derive(42, 1);
        let av: Vec<f32> = (0..8).map(|_| a.normal()).collect();
        let bv: Vec<f32> = (0..8).map(|_| b.normal()).collect();
        assert_ne!(av, bv);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f32..50.0, 2..24)) {
                let cols = vals.len();
                let m = Matrix::from_vec(1, cols, vals).unwrap();
                let out = softmax_rows(&m).unwrap();
                let sum: f64 = out.data().iter().map(|&v| v as f64).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(out.data().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn softmax_shift_invariant(
                vals in proptest::collection::vec(-20.0f32..20.0, 2..16),
                shift in -30.0f32..30.0,
            ) {
                let cols = vals.len();
                let shifted: Vec<f32> = vals.iter().map(|v| v + shift).collect();
                let a = softmax_rows(&Matrix::from_vec(1, cols, vals).unwrap()).unwrap();
                let b = softmax_rows(&Matrix::from_vec(1, cols, shifted).unwrap()).unwrap();
                for (x, y) in a.data().iter().zip(b.data().iter()) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }

            #[test]
            fn layer_norm_statistics(vals in proptest::collection::vec(-10.0f32..10.0, 4..64)) {
                // skip near-constant inputs; eps dominates there
                let n = vals.len();
                let mean: f32 = vals.iter().sum::<f32>() / n as f32;
                let var: f32 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                prop_assume!(var > 1e-3);
                let out = layer_norm(&vals, &vec![1.0; n], &vec![0.0; n], 1e-9).unwrap();
                let m: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let v: f64 = out.iter().map(|&x| (x as f64 - m) * (x as f64 - m)).sum::<f64>() / n as f64;
                prop_assert!(m.abs() < 1e-5);
                prop_assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }
}
