//! Loss-model interface and the synthetic quadratic Gaussian problem.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{default_tol, namespace, sym_sqrt, sym_sqrt_inv, Matrix, RngStream, SymMatrix};

/// A stochastic objective `f(θ) = E[f_γ(θ)]` together with the gradient-noise
/// statistics the continuous models need.
///
/// `Σ` is the covariance of the per-sample gradient deviation and `M` the
/// covariance of its entrywise square.
pub trait LossModel: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> f64;

    fn grad_f_into(&self, theta: &[f64], out: &mut [f64]);

    fn grad_f(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad_f_into(theta, &mut out);
        out
    }

    /// `∇²f(θ)·v`.
    fn hess_mul_into(&self, theta: &[f64], v: &[f64], out: &mut [f64]);

    fn hess_mul(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.hess_mul_into(theta, v, &mut out);
        out
    }

    /// `Σ_{h,k} w_{hk} ∇(∂²_{hk} f)(θ)`.
    fn third_contract(&self, theta: &[f64], w: &Matrix) -> Vec<f64>;

    fn sigma(&self, theta: &[f64]) -> SymMatrix;

    fn sigma_d(&self, theta: &[f64]) -> Vec<f64> {
        self.sigma(theta).diag()
    }

    fn sigma_sqrt(&self, theta: &[f64]) -> Result<SymMatrix> {
        let s = self.sigma(theta);
        sym_sqrt(&s, default_tol(&s))
    }

    fn sigma_sqrt_inv(&self, theta: &[f64]) -> Result<SymMatrix> {
        let s = self.sigma(theta);
        sym_sqrt_inv(&s, default_tol(&s))
    }

    /// Jacobian of `Σ_d`: entry (i, h) is `∂_h Σ_ii`.
    fn grad_sigma_d(&self, theta: &[f64]) -> Matrix;

    /// `∂_h Σ^{1/2}`.
    fn d_sigma_sqrt(&self, theta: &[f64], h: usize) -> SymMatrix;

    /// `∂²_{hk} Σ^{1/2}`.
    fn d2_sigma_sqrt(&self, theta: &[f64], h: usize, k: usize) -> SymMatrix;

    fn m_matrix(&self, theta: &[f64]) -> SymMatrix;

    fn m_sqrt(&self, theta: &[f64]) -> Result<SymMatrix> {
        let m = self.m_matrix(theta);
        sym_sqrt(&m, default_tol(&m))
    }

    /// One draw of the mean deviation `δ = (1/B₀)Σᵢ(∇f_{γᵢ}(θ) − ∇f(θ))`.
    fn sample_deviation_into(&self, theta: &[f64], batch: usize, rng: &mut RngStream, out: &mut [f64]);

    fn sample_deviation(&self, theta: &[f64], batch: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_deviation_into(theta, batch, rng, &mut out);
        out
    }

    /// True when Σ (and hence M) does not depend on θ, which lets callers
    /// cache square roots.
    fn constant_covariance(&self) -> bool {
        false
    }

    /// True when f is quadratic, so third derivatives vanish.
    fn quadratic(&self) -> bool {
        false
    }
}

/// Law the expectations defining ∇f, Σ and M are taken under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpectationMode {
    /// Uniform over the stored dataset, the law the discrete algorithm samples.
    Empirical,
    /// γ ~ N(0, I) exactly: γ̄ = 0 and Ĉ = I. Deviations are drawn fresh.
    Population,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FourthMomentMode {
    /// `M = 2 Σ⊙Σ`, exact for Gaussian deviations.
    GaussianAnalytic,
    /// Dataset covariance of the squared deviations.
    Empirical,
}

/// `f_γ(θ) = ½(θ−γ)ᵀH(θ−γ) − ½Tr H` with γ drawn from a Gaussian dataset.
#[derive(Clone, Debug)]
pub struct QuadraticGaussianProblem {
    d: usize,
    h: SymMatrix,
    dataset: Vec<f64>,
    dataset_seed: u64,
    expectation: ExpectationMode,
    fourth_moment: FourthMomentMode,
    full_pass: bool,
    mean: Vec<f64>,
    cov: SymMatrix,
    /// Rows `−H(γ_j − γ̄)`; empty in population mode.
    deviations: Vec<f64>,
    sigma: SymMatrix,
    sigma_sqrt: SymMatrix,
    m: SymMatrix,
    m_sqrt: SymMatrix,
}

/// Seeded SPD matrix `AᵀA/d + 0.1 I` with `A` standard normal.
pub fn generate_h(d: usize, h_seed: u64) -> SymMatrix {
    let mut rng = RngStream::new(h_seed, namespace::H_MATRIX, 0);
    let a = Matrix::from_fn(d, d, |_, _| rng.normal());
    let mut ata = a.transpose().matmul(&a).scaled(1.0 / d as f64);
    ata.add_scaled(0.1, &Matrix::identity(d));
    SymMatrix::from_matrix(&ata)
}

/// Row-major `size × d` iid standard-normal samples.
pub fn generate_dataset(d: usize, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, namespace::DATASET, 0);
    let mut data = vec![0.0; d * size];
    rng.fill_normal(&mut data);
    data
}

pub fn generate_problem(d: usize, h_seed: u64, data_seed: u64, dataset_size: usize) -> QuadraticGaussianProblem {
    assert!(d >= 1 && dataset_size >= 1);
    let h = generate_h(d, h_seed);
    let data = generate_dataset(d, dataset_size, data_seed);
    QuadraticGaussianProblem::from_dataset(h, data, data_seed)
}

impl QuadraticGaussianProblem {
    /// Empirical-mode problem over an explicit row-major dataset.
    pub fn from_dataset(h: SymMatrix, dataset: Vec<f64>, dataset_seed: u64) -> Self {
        let d = h.dim();
        assert!(d >= 1 && !dataset.is_empty() && dataset.len().is_multiple_of(d), "dataset must be size × d");
        let n = dataset.len() / d;
        let mut mean = vec![0.0; d];
        for row in dataset.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Matrix::zeros(d, d);
        let mut centred = vec![0.0; d];
        let mut deviations = Vec::with_capacity(dataset.len());
        for row in dataset.chunks_exact(d) {
            for i in 0..d {
                centred[i] = row[i] - mean[i];
            }
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += centred[i] * centred[j];
                }
            }
            let hc = h.mul_vec(&centred);
            deviations.extend(hc.iter().map(|x| -x));
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= n as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let mut p = Self::assemble(h, mean, SymMatrix::from_matrix(&cov), ExpectationMode::Empirical);
        p.dataset = dataset;
        p.dataset_seed = dataset_seed;
        p.deviations = deviations;
        p
    }

    /// Population-mode problem: γ ~ N(0, I), so `Σ = H²` exactly.
    pub fn population(h: SymMatrix) -> Self {
        let d = h.dim();
        Self::assemble(h, vec![0.0; d], SymMatrix::identity(d), ExpectationMode::Population)
    }

    fn assemble(h: SymMatrix, mean: Vec<f64>, cov: SymMatrix, expectation: ExpectationMode) -> Self {
        let d = h.dim();
        let hm = h.as_matrix();
        let sigma = SymMatrix::from_matrix(&hm.matmul(cov.as_matrix()).matmul(hm));
        let sigma_sqrt = sym_sqrt(&sigma, default_tol(&sigma)).expect("HĈH is PSD");
        let m = gaussian_m(&sigma);
        let m_sqrt = sym_sqrt(&m, default_tol(&m)).expect("2Σ⊙Σ is PSD");
        Self {
            d,
            h,
            dataset: Vec::new(),
            dataset_seed: 0,
            expectation,
            fourth_moment: FourthMomentMode::GaussianAnalytic,
            full_pass: false,
            mean,
            cov,
            deviations: Vec::new(),
            sigma,
            sigma_sqrt,
            m,
            m_sqrt,
        }
    }

    /// Switches the M convention. Empirical mode needs a dataset.
    pub fn with_fourth_moment(mut self, mode: FourthMomentMode) -> Result<Self> {
        self.m = match mode {
            FourthMomentMode::GaussianAnalytic => gaussian_m(&self.sigma),
            FourthMomentMode::Empirical => {
                if self.deviations.is_empty() {
                    return Err(Error::Validation("empirical fourth moments need a dataset".into()));
                }
                empirical_m(&self.deviations, self.d)
            }
        };
        self.m_sqrt = sym_sqrt(&self.m, default_tol(&self.m))?;
        self.fourth_moment = mode;
        Ok(self)
    }

    /// Debug mode: every deviation draw averages the whole dataset instead
    /// of sampling indices, so it is zero up to rounding.
    pub fn with_full_pass(mut self, on: bool) -> Self {
        self.full_pass = on;
        self
    }

    pub fn h(&self) -> &SymMatrix {
        &self.h
    }

    pub fn dataset(&self) -> &[f64] {
        &self.dataset
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset.len().checked_div(self.d).unwrap_or(0)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset_seed
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn empirical_cov(&self) -> &SymMatrix {
        &self.cov
    }

    pub fn expectation(&self) -> ExpectationMode {
        self.expectation
    }

    pub fn fourth_moment(&self) -> FourthMomentMode {
        self.fourth_moment
    }
}

/// Isserlis: `Cov(x_i², x_j²) = 2Σ_ij²` for centred Gaussian x.
pub fn gaussian_m(sigma: &SymMatrix) -> SymMatrix {
    sigma.map(|s| 2.0 * s * s)
}

fn empirical_m(deviations: &[f64], d: usize) -> SymMatrix {
    let n = (deviations.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in deviations.chunks_exact(d) {
        for i in 0..d {
            mean[i] += row[i] * row[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut m = Matrix::zeros(d, d);
    for row in deviations.chunks_exact(d) {
        for i in 0..d {
            let a = row[i] * row[i] - mean[i];
            for j in i..d {
                m[(i, j)] += a * (row[j] * row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            m[(i, j)] /= n;
            m[(j, i)] = m[(i, j)];
        }
    }
    SymMatrix::from_matrix(&m)
}

impl LossModel for QuadraticGaussianProblem {
    fn dim(&self) -> usize {
        self.d
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let c: Vec<f64> = theta.iter().zip(&self.mean).map(|(t, m)| t - m).collect();
        let hc = self.h.mul_vec(&c);
        let quad: f64 = c.iter().zip(&hc).map(|(a, b)| a * b).sum();
        let hm = self.h.as_matrix();
        let tr_hc: f64 = (0..self.d).map(|i| (0..self.d).map(|k| hm[(i, k)] * self.cov[(k, i)]).sum::<f64>()).sum();
        let tr_h: f64 = self.h.diag().iter().sum();
        0.5 * quad + 0.5 * tr_hc - 0.5 * tr_h
    }

    fn grad_f_into(&self, theta: &[f64], out: &mut [f64]) {
        let hm = self.h.as_matrix();
        for (i, o) in out.iter_mut().enumerate() {
            *o = hm.row(i).iter().zip(theta.iter().zip(&self.mean)).map(|(h, (t, m))| h * (t - m)).sum();
        }
    }

    fn hess_mul_into(&self, _theta: &[f64], v: &[f64], out: &mut [f64]) {
        self.h.mul_vec_into(v, out)
    }

    fn third_contract(&self, _theta: &[f64], _w: &Matrix) -> Vec<f64> {
        vec![0.0; self.d]
    }

    fn sigma(&self, _theta: &[f64]) -> SymMatrix {
        self.sigma.clone()
    }

    fn sigma_sqrt(&self, _theta: &[f64]) -> Result<SymMatrix> {
        Ok(self.sigma_sqrt.clone())
    }

    fn grad_sigma_d(&self, _theta: &[f64]) -> Matrix {
        Matrix::zeros(self.d, self.d)
    }

    fn d_sigma_sqrt(&self, _theta: &[f64], _h: usize) -> SymMatrix {
        SymMatrix::zeros(self.d)
    }

    fn d2_sigma_sqrt(&self, _theta: &[f64], _h: usize, _k: usize) -> SymMatrix {
        SymMatrix::zeros(self.d)
    }

    fn m_matrix(&self, _theta: &[f64]) -> SymMatrix {
        self.m.clone()
    }

    fn m_sqrt(&self, _theta: &[f64]) -> Result<SymMatrix> {
        Ok(self.m_sqrt.clone())
    }

    fn sample_deviation_into(&self, _theta: &[f64], batch: usize, rng: &mut RngStream, out: &mut [f64]) {
        assert!(batch >= 1, "batch must be positive");
        out.iter_mut().for_each(|x| *x = 0.0);
        let d = self.d;
        match self.expectation {
            ExpectationMode::Empirical if self.full_pass => {
                for row in self.deviations.chunks_exact(d) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                let n = self.dataset_size() as f64;
                out.iter_mut().for_each(|x| *x /= n);
            }
            ExpectationMode::Empirical => {
                let n = self.dataset_size();
                for _ in 0..batch {
                    let j = rng.index(n);
                    for (o, x) in out.iter_mut().zip(&self.deviations[j * d..(j + 1) * d]) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|x| *x /= batch as f64);
            }
            ExpectationMode::Population => {
                let mut xi = vec![0.0; d];
                let mut hx = vec![0.0; d];
                for _ in 0..batch {
                    rng.fill_normal(&mut xi);
                    self.h.mul_vec_into(&xi, &mut hx);
                    for (o, x) in out.iter_mut().zip(&hx) {
                        *o -= x;
                    }
                }
                out.iter_mut().for_each(|x| *x /= batch as f64);
            }
        }
    }

    fn constant_covariance(&self) -> bool {
        true
    }

    fn quadratic(&self) -> bool {
        true
    }
}

const MAGIC: &[u8; 6] = b"SMEDS1";

/// Contents of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub d: usize,
    pub seed: u64,
    /// Row-major `size × d`.
    pub data: Vec<f64>,
}

impl DatasetFile {
    pub fn size(&self) -> usize {
        self.data.len() / self.d.max(1)
    }

    /// Layout: magic `SMEDS1`, then `d`, `size`, `seed` as little-endian u64,
    /// then the samples as little-endian f64.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.d as u64, self.size() as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset("bad magic".into()));
        }
        let mut header = [0u64; 3];
        for h in &mut header {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [d, size, seed] = header;
        let len = (d as usize)
            .checked_mul(size as usize)
            .ok_or_else(|| Error::Dataset("header overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 8 {
            return Err(Error::Dataset(format!("expected {} payload bytes, found {}", len * 8, bytes.len())));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { d: d as usize, seed, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Regenerates from the stored seed and checks bitwise equality.
    pub fn matches_seed(&self) -> bool {
        let regen = generate_dataset(self.d, self.size(), self.seed);
        regen.len() == self.data.len() && regen.iter().zip(&self.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_is_positive_in_one_dimension() {
        for seed in 0..20 {
            let h = generate_h(1, seed);
            let mut rng = RngStream::new(seed, namespace::H_MATRIX, 0);
            let a = rng.normal();
            assert_eq!(h[(0, 0)], a * a + 0.1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_problem(4, 1, 2, 500);
        let b = generate_problem(4, 1, 2, 500);
        assert_eq!(a.h(), b.h());
        assert_eq!(a.dataset(), b.dataset());
    }

    #[test]
    fn dataset_covariance_is_near_identity() {
        let p = generate_problem(6, 1, 2, 100_000);
        let diff = p.empirical_cov().as_matrix().max_abs_diff(&Matrix::identity(6));
        assert!(diff < 0.05, "{diff}");
    }

    #[test]
    fn grad_vanishes_at_mean_and_is_identity_map() {
        let p = generate_problem(3, 4, 5, 1000);
        let g = p.grad_f(p.mean());
        assert!(g.iter().all(|x| x.abs() < 1e-15));
        let q = QuadraticGaussianProblem::population(SymMatrix::identity(2));
        assert_eq!(q.grad_f(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn sigma_small_cases() {
        let q = QuadraticGaussianProblem::population(SymMatrix::identity(3));
        assert_eq!(q.sigma(&[0.0; 3]), SymMatrix::identity(3));
        let q = QuadraticGaussianProblem::population(SymMatrix::from_diag(&[2.0]));
        assert_eq!(q.sigma(&[0.0])[(0, 0)], 4.0);
    }

    #[test]
    fn m_small_cases() {
        let q = QuadraticGaussianProblem::population(SymMatrix::from_diag(&[1.5]));
        let s = q.sigma(&[0.0])[(0, 0)];
        assert!((q.m_matrix(&[0.0])[(0, 0)] - 2.0 * s * s).abs() < 1e-15);
        let m = gaussian_m(&SymMatrix::from_diag(&[1.0, 4.0]));
        assert_eq!(m, SymMatrix::from_diag(&[2.0, 32.0]));
    }

    #[test]
    fn single_sample_dataset_has_no_noise() {
        let p = QuadraticGaussianProblem::from_dataset(SymMatrix::identity(2), vec![0.3, -1.2], 0);
        let mut rng = RngStream::new(0, namespace::TEST, 0);
        for _ in 0..10 {
            assert_eq!(p.sample_deviation(&[1.0, 1.0], 3, &mut rng), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn full_pass_deviation_is_zero() {
        let p = generate_problem(3, 1, 2, 2000).with_full_pass(true);
        let mut rng = RngStream::new(0, namespace::TEST, 0);
        let v = p.sample_deviation(&[0.5, 0.1, -0.2], 2000, &mut rng);
        assert!(v.iter().all(|x| x.abs() < 1e-13), "{v:?}");
    }

    #[test]
    fn quadratic_derivatives_are_exactly_zero() {
        let p = generate_problem(4, 3, 3, 100);
        let th = [0.1, 0.2, 0.3, 0.4];
        assert!(p.grad_sigma_d(&th).is_zero());
        for h in 0..4 {
            assert!(p.d_sigma_sqrt(&th, h).is_zero());
            for k in 0..4 {
                assert!(p.d2_sigma_sqrt(&th, h, k).is_zero());
            }
        }
        assert!(p.third_contract(&th, &Matrix::identity(4)).iter().all(|&x| x == 0.0));
        assert_eq!(p.sigma_d(&th), p.sigma(&th).diag());
    }

    #[test]
    fn dataset_file_round_trip() {
        let data = generate_dataset(3, 10, 77);
        let file = DatasetFile { d: 3, seed: 77, data };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"SMEDS1");
        assert_eq!(buf.len(), 6 + 24 + 30 * 8);
        let back = DatasetFile::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, file);
        assert!(back.matches_seed());
        buf[0] = b'X';
        assert!(DatasetFile::read_from(buf.as_slice()).is_err());
    }
}
