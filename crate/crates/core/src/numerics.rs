//! Dense linear algebra, PSD square roots, seeded Gaussian streams and
//! log-log regression.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `out = self * v`.
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(v, &mut out);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Scales row i by `d[i]`, i.e. returns `diag(d) * self`.
    pub fn scale_rows(&self, d: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| d[i] * self[(i, j)])
    }

    /// Returns `self * diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * d[j])
    }

    /// Max-abs entry norm.
    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies `block` into `self` with its top-left corner at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square matrix that is symmetric by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Matrix", try_from = "Matrix")]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Symmetrizes `(m + mᵀ)/2`. Panics if `m` is not square.
    pub fn from_matrix(m: &Matrix) -> Self {
        assert_eq!(m.rows(), m.cols(), "SymMatrix must be square");
        let n = m.rows();
        Self(Matrix::from_fn(n, n, |i, j| if i == j { m[(i, i)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) }))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.0.mul_vec(v)
    }

    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        self.0.mul_vec_into(v, out)
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.norm_inf()
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    /// Entrywise map that keeps symmetry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let n = self.dim();
        Self(Matrix::from_fn(n, n, |i, j| f(self.0[(i, j)])))
    }

    fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        let n = self.dim();
        SymmetricEigen::new(DMatrix::from_row_slice(n, n, self.0.as_slice()))
    }

    /// Rebuilds `V diag(f(λ)) Vᵀ`, symmetrized exactly.
    fn spectral(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Self {
        let n = eig.eigenvalues.len();
        let vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| f(l)).collect();
        let v = &eig.eigenvectors;
        let m = Matrix::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * vals[k] * v[(j, k)]).sum());
        Self::from_matrix(&m)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl From<SymMatrix> for Matrix {
    fn from(s: SymMatrix) -> Matrix {
        s.0
    }
}

impl TryFrom<Matrix> for SymMatrix {
    type Error = String;
    fn try_from(m: Matrix) -> std::result::Result<Self, String> {
        if m.rows() != m.cols() {
            return Err(format!("expected a square matrix, got {}x{}", m.rows(), m.cols()));
        }
        Ok(SymMatrix::from_matrix(&m))
    }
}

/// Tolerance used when callers do not supply one: `1e-10 * ‖S‖∞`.
pub fn default_tol(s: &SymMatrix) -> f64 {
    1e-10 * s.norm_inf()
}

/// PSD square root through the eigendecomposition. Eigenvalues in
/// `[-tol, 0)` are clamped to zero.
pub fn sym_sqrt(s: &SymMatrix, tol: f64) -> Result<SymMatrix> {
    if s.dim() == 0 {
        return Ok(s.clone());
    }
    let eig = s.eigen();
    let min = eig.eigenvalues.min();
    if min < -tol {
        return Err(Error::EigenvalueBelowTolerance { min, tol });
    }
    Ok(SymMatrix::spectral(&eig, |l| l.max(0.0).sqrt()))
}

/// Inverse of the PSD square root; fails unless every eigenvalue exceeds `tol`.
pub fn sym_sqrt_inv(s: &SymMatrix, tol: f64) -> Result<SymMatrix> {
    if s.dim() == 0 {
        return Ok(s.clone());
    }
    let eig = s.eigen();
    let min = eig.eigenvalues.min();
    if min <= tol {
        return Err(Error::SingularCovariance { min, tol });
    }
    Ok(SymMatrix::spectral(&eig, |l| 1.0 / l.sqrt()))
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seed namespaces. Each consumer of randomness owns one so that streams
/// never overlap.
pub mod namespace {
    pub const H_MATRIX: u64 = 0x4d41_5452;
    pub const DATASET: u64 = 0x4441_5441;
    pub const DISCRETE: u64 = 0x4449_5343;
    pub const SDE_W: u64 = 0x5344_4557;
    pub const SDE_B: u64 = 0x5344_4542;
    pub const INITIAL: u64 = 0x494e_4954;
    pub const TOY: u64 = 0x544f_5921;
    pub const TEST: u64 = 0x5445_5354;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A named, independent random stream: ChaCha8 keyed by `(seed, namespace)`
/// with the 64-bit ChaCha stream id set to `index` (typically a path index).
#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, namespace: u64, index: u64) -> Self {
        let key = splitmix64(seed ^ splitmix64(namespace));
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(index);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.inner.sample(StandardNormal);
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn gaussian_vector(rng: &mut RngStream, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    rng.fill_normal(&mut v);
    v
}

/// Least-squares fit of `log(error) = slope * log(tau) + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero with only two points.
    pub slope_stderr: f64,
}

pub fn loglog_slope(taus: &[f64], errors: &[f64]) -> Result<LogLogFit> {
    if taus.len() != errors.len() {
        return Err(Error::LengthMismatch { left: taus.len(), right: errors.len() });
    }
    if taus.len() < 2 {
        return Err(Error::TooFewPoints { need: 2, got: taus.len() });
    }
    if taus.iter().chain(errors).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveInput);
    }
    let n = taus.len() as f64;
    let xs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::TooFewPoints { need: 2, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if taus.len() > 2 {
        let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LogLogFit { slope, intercept, slope_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_psd(seed: u64, n: usize, rank: usize) -> SymMatrix {
        let mut rng = RngStream::new(seed, namespace::TEST, 0);
        let a = Matrix::from_fn(rank, n, |_, _| rng.normal());
        SymMatrix::from_matrix(&a.transpose().matmul(&a))
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i3 = SymMatrix::identity(3);
        assert!(sym_sqrt(&i3, 1e-12).unwrap().as_matrix().max_abs_diff(i3.as_matrix()) < 1e-15);
        let r = sym_sqrt(&SymMatrix::from_diag(&[4.0, 9.0]), 1e-12).unwrap();
        assert!(r.as_matrix().max_abs_diff(&Matrix::from_diag(&[2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn sqrt_round_trip_random_psd() {
        let s = random_psd(7, 6, 6);
        let r = sym_sqrt(&s, default_tol(&s)).unwrap();
        assert!(r.as_matrix().matmul(r.as_matrix()).max_abs_diff(s.as_matrix()) < 1e-10);
    }

    #[test]
    fn sqrt_clamps_rank_deficient() {
        let s = random_psd(3, 5, 2);
        let r = sym_sqrt(&s, 1e-9).unwrap();
        assert!(r.as_matrix().matmul(r.as_matrix()).max_abs_diff(s.as_matrix()) < 1e-10);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let s = SymMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(sym_sqrt(&s, 1e-10), Err(Error::EigenvalueBelowTolerance { .. })));
    }

    #[test]
    fn sqrt_inv_cases() {
        let i2 = SymMatrix::identity(2);
        assert!(sym_sqrt_inv(&i2, 1e-12).unwrap().as_matrix().max_abs_diff(i2.as_matrix()) < 1e-15);
        let r = sym_sqrt_inv(&SymMatrix::from_diag(&[4.0]), 1e-12).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
        let s = random_psd(11, 5, 8);
        let tol = default_tol(&s);
        let prod = sym_sqrt_inv(&s, tol).unwrap().as_matrix().matmul(sym_sqrt(&s, tol).unwrap().as_matrix());
        assert!(prod.max_abs_diff(&Matrix::identity(5)) < 1e-9);
        let singular = random_psd(5, 4, 2);
        assert!(matches!(sym_sqrt_inv(&singular, 1e-9), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn hadamard_cases() {
        assert_eq!(hadamard(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
        let a = [1.5, -2.0, 0.25];
        assert_eq!(hadamard(&a, &[1.0; 3]).unwrap(), a.to_vec());
        assert_eq!(hadamard(&a, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(matches!(hadamard(&a, &[1.0]), Err(Error::LengthMismatch { left: 3, right: 1 })));
    }

    #[test]
    fn gaussian_stream_determinism_and_moments() {
        let a = gaussian_vector(&mut RngStream::new(1, namespace::TEST, 4), 16);
        let b = gaussian_vector(&mut RngStream::new(1, namespace::TEST, 4), 16);
        let c = gaussian_vector(&mut RngStream::new(1, namespace::TEST, 5), 16);
        assert_eq!(a, b);
        assert_ne!(a, c);

        let v = gaussian_vector(&mut RngStream::new(2, namespace::TEST, 0), 1_000_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn sign_patterns_are_uniform() {
        // Chi-square over the 8 sign patterns of consecutive triples, across streams.
        let mut counts = [0u64; 8];
        for stream in 0..64 {
            let mut rng = RngStream::new(9, namespace::TEST, stream);
            for _ in 0..1000 {
                let v = gaussian_vector(&mut rng, 3);
                let idx = v.iter().enumerate().fold(0, |acc, (i, x)| acc | (usize::from(*x > 0.0) << i));
                counts[idx] += 1;
            }
        }
        let expected = 64_000.0 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 0.1% critical value.
        assert!(chi2 < 24.32, "chi2 {chi2}");
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let taus = [0.125, 0.0625, 0.03125];
        let e2: Vec<f64> = taus.iter().map(|t| t * t).collect();
        assert!((loglog_slope(&taus, &e2).unwrap().slope - 2.0).abs() < 1e-12);
        let e1: Vec<f64> = taus.iter().map(|t| 3.7 * t).collect();
        assert!((loglog_slope(&taus, &e1).unwrap().slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_with_noise() {
        let mut rng = RngStream::new(3, namespace::TEST, 0);
        let taus: Vec<f64> = (3..8).map(|k| 2f64.powi(-k)).collect();
        let errs: Vec<f64> = taus.iter().map(|t| t.powf(1.5) * (1.0 + 0.01 * rng.normal())).collect();
        let s = loglog_slope(&taus, &errs).unwrap().slope;
        assert!((1.4..=1.6).contains(&s), "{s}");
    }

    #[test]
    fn slope_rejects_bad_input() {
        assert!(matches!(loglog_slope(&[0.1, 0.0], &[1.0, 1.0]), Err(Error::NonPositiveInput)));
        assert!(matches!(loglog_slope(&[0.1, 0.2], &[1.0, -1.0]), Err(Error::NonPositiveInput)));
        assert!(matches!(loglog_slope(&[0.1], &[1.0]), Err(Error::TooFewPoints { .. })));
    }
}
