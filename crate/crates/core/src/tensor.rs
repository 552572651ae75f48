//! Minimal dense numeric kernel: row-major matrices, matmul, row softmax,
//! and rotary position embedding. Everything downstream builds on this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element width used for cache-size accounting and on-disk emulation.
///
/// Arithmetic always runs in f64; [`Precision::F32`] rounds generated data
/// through f32 and halves the byte accounting, mimicking a deployment that
/// stores activations in single precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn bytes_per_element(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Dense row-major matrix of f64.
///
/// Invariant: `data.len() == rows * cols` and every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a row-major buffer, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{rows}x{cols} matrix contains NaN or infinity"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Copy of the row range `[start, end)` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot push a row of {} entries onto a {} column matrix",
                row.len(),
                self.cols
            )));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pushed row contains NaN or infinity".into()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Removes the first `n` rows in place.
    pub fn drop_front_rows(&mut self, n: usize) {
        assert!(n <= self.rows);
        self.data.drain(0..n * self.cols);
        self.rows -= n;
    }

    /// Standard matrix product. Deterministic accumulation order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        debug_assert!(out.data.iter().all(|v| v.is_finite()));
        Ok(out)
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "concat_cols: {} rows vs {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Rounds every entry through f32 (storage-precision emulation).
    pub fn round_to_f32(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Rotary position embedding parameters: rotary width and frequency base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RopeConfig {
    dim: usize,
    base: f64,
}

impl RopeConfig {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary dim must be a positive even number, got {dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        Ok(RopeConfig { dim, base })
    }

    /// Conventional parameterization with base 10000.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(dim, 10_000.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angular frequency of coordinate pair `p`: base^(-2p/dim).
    fn frequency(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.dim as f64)
    }
}

/// Rotates each row of `v` by its token position.
///
/// Pair `p` occupies coordinates (2p, 2p+1) and turns through
/// `position * base^(-2p/dim)` radians.
pub fn rope_apply(v: &Matrix, positions: &[usize], cfg: &RopeConfig) -> Result<Matrix> {
    if v.cols() != cfg.dim() {
        return Err(Error::Shape(format!(
            "rope: matrix has {} columns, rotary dim is {}",
            v.cols(),
            cfg.dim()
        )));
    }
    if positions.len() != v.rows() {
        return Err(Error::Shape(format!(
            "rope: {} positions for {} rows",
            positions.len(),
            v.rows()
        )));
    }
    let pairs = cfg.dim() / 2;
    let mut out = v.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        for p in 0..pairs {
            let angle = pos as f64 * cfg.frequency(p);
            let (sin, cos) = angle.sin_cos();
            let a = row[2 * p];
            let b = row[2 * p + 1];
            row[2 * p] = a * cos - b * sin;
            row[2 * p + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("softmax over an empty matrix".into()));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
        softmax_in_place(row);
    }
    Ok(out)
}

/// Softmax of a nonempty slice, stabilized by max subtraction.
pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty());
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Index-order-independent product used as an oracle against `matmul`.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.data[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_leaves_operand_unchanged() {
        let a = Matrix::from_vec(2, 2, vec![3.0, -1.5, 0.25, 7.0]).unwrap();
        let prod = Matrix::identity(2).matmul(&a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![5.0, 6.0]).unwrap();
        let prod = a.matmul(&b).unwrap();
        assert_eq!(prod.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(z.matmul(&a).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::zeros(1, 3);
        let s = softmax_rows(&m).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(s.get(0, j), 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let m = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(s.get(0, 0) > 1.0 - 1e-12);
        assert!(s.get(0, 1) >= 0.0);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_closed_form() {
        let m = Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 1), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let cfg = RopeConfig::standard(4).unwrap();
        let v = Matrix::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let rotated = rope_apply(&v, &[0], &cfg).unwrap();
        assert_eq!(rotated, v);
    }

    #[test]
    fn rope_single_pair_closed_form() {
        let cfg = RopeConfig::new(2, 123.0).unwrap();
        let v = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        for m in [1usize, 2, 7] {
            let rotated = rope_apply(&v, &[m], &cfg).unwrap();
            assert_abs_diff_eq!(rotated.get(0, 0), (m as f64).cos(), epsilon = 1e-15);
            assert_abs_diff_eq!(rotated.get(0, 1), (m as f64).sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn rope_rejects_odd_dim() {
        assert!(matches!(RopeConfig::new(3, 10_000.0), Err(Error::Config(_))));
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rope_inner_product_depends_only_on_relative_position() {
        use rand::{Rng, SeedableRng};
        let cfg = RopeConfig::standard(8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (m, n, s) = (
                rng.gen_range(0..100usize),
                rng.gen_range(0..100usize),
                rng.gen_range(0..50usize),
            );
            let qm = rope_apply(&Matrix::from_rows(&[q.clone()]).unwrap(), &[m], &cfg).unwrap();
            let kn = rope_apply(&Matrix::from_rows(&[k.clone()]).unwrap(), &[n], &cfg).unwrap();
            let qms = rope_apply(&Matrix::from_rows(&[q.clone()]).unwrap(), &[m + s], &cfg).unwrap();
            let kns = rope_apply(&Matrix::from_rows(&[k.clone()]).unwrap(), &[n + s], &cfg).unwrap();
            assert_abs_diff_eq!(
                dot(qm.row(0), kn.row(0)),
                dot(qms.row(0), kns.row(0)),
                epsilon = 1e-7
            );
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let s = softmax_rows(&m).unwrap();
            for i in 0..rows {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn rope_preserves_pair_norms(pos in 0usize..1000, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let cfg = RopeConfig::standard(6).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let m = Matrix::from_rows(&[row.clone()]).unwrap();
            let r = rope_apply(&m, &[pos], &cfg).unwrap();
            for p in 0..3 {
                let before = (row[2 * p].powi(2) + row[2 * p + 1].powi(2)).sqrt();
                let after = (r.get(0, 2 * p).powi(2) + r.get(0, 2 * p + 1).powi(2)).sqrt();
                prop_assert!((before - after).abs() < 1e-9);
            }
        }

        #[test]
        fn matmul_matches_naive_oracle(n in 1usize..8, m in 1usize..8, k in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let b = Matrix::from_vec(k, m, (0..k * m).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }
}
