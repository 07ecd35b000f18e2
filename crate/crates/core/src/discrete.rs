//! Rescaled, regularized RMSprop and Adam iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, SymMatrix};
use crate::problem::LossModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Rmsprop,
    Adam,
}

/// Scaling regime: balistic (`τ = η`) or batch-equivalent (`τ = η²`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Balistic,
    BatchEquivalent,
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Rmsprop => "rmsprop",
            Optimizer::Adam => "adam",
        })
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Balistic => "balistic",
            Regime::BatchEquivalent => "batch-equivalent",
        })
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rmsprop" => Ok(Optimizer::Rmsprop),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer `{s}` (expected rmsprop or adam)")),
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "balistic" => Ok(Regime::Balistic),
            "batch-equivalent" => Ok(Regime::BatchEquivalent),
            _ => Err(format!("unknown regime `{s}` (expected balistic or batch-equivalent)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub tau: f64,
    pub horizon_t: f64,
    /// Clamp level `c` of `φ(x) = max(x, c)`.
    pub phi_threshold: f64,
}

impl Hyper {
    /// Defaults `ε = 1e-6`, `σ = 1`, all λ = 1 and threshold `c = τ`.
    pub fn new(tau: f64, horizon_t: f64) -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-6,
            sigma: 1.0,
            tau,
            horizon_t,
            phi_threshold: tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("epsilon", self.epsilon),
            ("sigma", self.sigma),
            ("horizon_t", self.horizon_t),
            ("phi_threshold", self.phi_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0f64.min(self.horizon_t)) {
            return Err(Error::Validation(format!("tau must lie in (0, min(1, T)), got {}", self.tau)));
        }
        for (name, l) in [("lambda0", self.lambda0), ("lambda2", self.lambda2)] {
            if self.tau >= 1.0 / (2.0 * l) {
                return Err(Error::Validation(format!("tau < 1/(2*{name}) violated: tau = {}, {name} = {l}", self.tau)));
            }
        }
        if self.lambda1 * self.tau >= 1.0 {
            return Err(Error::Validation("lambda1 * tau must be below 1".into()));
        }
        Ok(())
    }

    /// `N = ⌊T/τ⌋`, robust to the rounding of `T/τ`.
    pub fn n_steps(&self) -> usize {
        steps_between(0.0, self.horizon_t, self.tau)
    }
}

/// Number of whole steps of size `h` in `[t0, t1]`, rounding values within
/// 1e-9 of an integer to that integer.
pub fn steps_between(t0: f64, t1: f64, h: f64) -> usize {
    let r = (t1 - t0) / h;
    let n = r.round();
    if (r - n).abs() < 1e-9 {
        n.max(0.0) as usize
    } else {
        r.floor().max(0.0) as usize
    }
}

/// `φ(x) = max(x, c)`.
pub fn phi(x: f64, c: f64) -> f64 {
    x.max(c)
}

/// `φ'(x)`, with the subgradient 0 at the kink.
pub fn phi_prime(x: f64, c: f64) -> f64 {
    if x > c {
        1.0
    } else {
        0.0
    }
}

/// `γ̄(k) = 1 − (1 − λτ)^k`.
pub fn gamma_bar(lambda: f64, k: usize, tau: f64) -> f64 {
    1.0 - (1.0 - lambda * tau).powi(k as i32)
}

/// `Γ̄_k = √γ̄₂(k) / γ̄₁(k+1)`.
pub fn big_gamma_bar(k: usize, hyper: &Hyper) -> f64 {
    gamma_bar(hyper.lambda2, k, hyper.tau).sqrt() / gamma_bar(hyper.lambda1, k + 1, hyper.tau)
}

/// Source of the gradient deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// `B₀` indices drawn uniformly from the dataset.
    Dataset { batch: usize },
    /// Gaussian with covariance Σ(θ), so third moments vanish exactly.
    GaussianSurrogate,
    /// No noise at all.
    Off,
}

/// Discrete state. `m` is present exactly for Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub theta: Vec<f64>,
    pub m: Option<Vec<f64>>,
    pub u: Vec<f64>,
    pub step: usize,
}

impl OptState {
    pub fn rmsprop(theta: Vec<f64>, u: Vec<f64>) -> Self {
        Self { theta, m: None, u, step: 0 }
    }

    pub fn adam(theta: Vec<f64>, m: Vec<f64>, u: Vec<f64>) -> Self {
        Self { theta, m: Some(m), u, step: 0 }
    }

    /// Concatenation `[θ, m, u]` (m omitted for RMSprop), the layout shared
    /// with the continuous models.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        if let Some(m) = &self.m {
            v.extend_from_slice(m);
        }
        v.extend_from_slice(&self.u);
        v
    }

    pub fn flatten_into(&self, out: &mut [f64]) {
        let d = self.theta.len();
        out[..d].copy_from_slice(&self.theta);
        let mut off = d;
        if let Some(m) = &self.m {
            out[off..off + d].copy_from_slice(m);
            off += d;
        }
        out[off..off + d].copy_from_slice(&self.u);
    }

    pub fn from_flat(flat: &[f64], d: usize, has_m: bool, step: usize) -> Self {
        let theta = flat[..d].to_vec();
        let (m, u) = if has_m {
            (Some(flat[d..2 * d].to_vec()), flat[2 * d..3 * d].to_vec())
        } else {
            (None, flat[d..2 * d].to_vec())
        };
        Self { theta, m, u, step }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().chain(self.u.iter()).chain(self.m.iter().flatten()).all(|x| x.is_finite())
    }
}

/// One configured discrete algorithm.
pub struct DiscreteDynamics<'a, L: LossModel + ?Sized> {
    pub optimizer: Optimizer,
    pub regime: Regime,
    pub hyper: Hyper,
    pub problem: &'a L,
    pub noise: NoiseMode,
    clamp: bool,
    sigma_sqrt: Option<SymMatrix>,
}

impl<L: LossModel + ?Sized> Clone for DiscreteDynamics<'_, L> {
    fn clone(&self) -> Self {
        Self { sigma_sqrt: self.sigma_sqrt.clone(), ..*self }
    }
}

impl<'a, L: LossModel + ?Sized> DiscreteDynamics<'a, L> {
    pub fn new(optimizer: Optimizer, regime: Regime, hyper: Hyper, problem: &'a L, noise: NoiseMode) -> Result<Self> {
        let sigma_sqrt = match noise {
            NoiseMode::GaussianSurrogate if problem.constant_covariance() => {
                Some(problem.sigma_sqrt(&vec![0.0; problem.dim()])?)
            }
            _ => None,
        };
        if let NoiseMode::Dataset { batch: 0 } = noise {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        Ok(Self { optimizer, regime, hyper, problem, noise, clamp: true, sigma_sqrt })
    }

    /// Replaces φ by the identity. Only meaningful while u stays positive.
    pub fn with_identity_phi(mut self) -> Self {
        self.clamp = false;
        self
    }

    fn phi(&self, x: f64) -> f64 {
        if self.clamp {
            phi(x, self.hyper.phi_threshold)
        } else {
            x
        }
    }

    /// Draws `ŝ = z/√τ`, which has covariance Σ(θ).
    pub fn draw_noise(&self, theta: &[f64], rng: &mut RngStream, out: &mut [f64]) -> Result<()> {
        match self.noise {
            NoiseMode::Off => out.iter_mut().for_each(|x| *x = 0.0),
            NoiseMode::Dataset { batch } => {
                self.problem.sample_deviation_into(theta, batch, rng, out);
                let s = (batch as f64).sqrt();
                out.iter_mut().for_each(|x| *x *= s);
            }
            NoiseMode::GaussianSurrogate => {
                let xi: Vec<f64> = (0..out.len()).map(|_| rng.normal()).collect();
                match &self.sigma_sqrt {
                    Some(s) => s.mul_vec_into(&xi, out),
                    None => self.problem.sigma_sqrt(theta)?.mul_vec_into(&xi, out),
                }
            }
        }
        Ok(())
    }

    /// The preconditioned-gradient scale on the noise: `σ` (balistic) or
    /// `σ/√τ` (batch-equivalent).
    fn noise_scale(&self) -> f64 {
        match self.regime {
            Regime::Balistic => self.hyper.sigma,
            Regime::BatchEquivalent => self.hyper.sigma / self.hyper.tau.sqrt(),
        }
    }

    /// Power of τ multiplying `g⊙g` in the u update.
    fn square_weight(&self) -> f64 {
        match self.regime {
            Regime::Balistic => self.hyper.tau,
            Regime::BatchEquivalent => self.hyper.tau * self.hyper.tau,
        }
    }

    /// Applies one step given the normalized noise draw `ŝ`.
    pub fn step_with_noise(&self, state: &mut OptState, s_hat: &[f64]) -> Result<()> {
        let d = state.theta.len();
        let tau = self.hyper.tau;
        let mut g = self.problem.grad_f(&state.theta);
        let scale = self.noise_scale();
        for (gi, si) in g.iter_mut().zip(s_hat) {
            *gi += scale * si;
        }
        let w2 = self.square_weight();
        match self.optimizer {
            Optimizer::Rmsprop => {
                let l = self.hyper.lambda0;
                for i in 0..d {
                    let p = 1.0 / (self.phi(state.u[i]).sqrt() + self.hyper.epsilon);
                    state.theta[i] -= tau * g[i] * p;
                    state.u[i] = state.u[i] - l * tau * state.u[i] + l * w2 * g[i] * g[i];
                }
            }
            Optimizer::Adam => {
                let k = state.step;
                let (l1, l2) = (self.hyper.lambda1, self.hyper.lambda2);
                let big_gamma = big_gamma_bar(k, &self.hyper);
                let eps_k = self.hyper.epsilon * gamma_bar(l2, k, tau).sqrt();
                let m = state.m.as_mut().expect("Adam state carries m");
                for i in 0..d {
                    m[i] = m[i] - l1 * tau * m[i] + l1 * tau * g[i];
                    if big_gamma != 0.0 {
                        let q = 1.0 / (self.phi(state.u[i]).sqrt() + eps_k);
                        state.theta[i] -= tau * big_gamma * m[i] * q;
                    }
                    state.u[i] = state.u[i] - l2 * tau * state.u[i] + l2 * w2 * g[i] * g[i];
                }
            }
        }
        let k = state.step;
        state.step += 1;
        if !state.is_finite() {
            return Err(Error::NonFiniteState { step: k });
        }
        Ok(())
    }

    pub fn step(&self, state: &mut OptState, rng: &mut RngStream) -> Result<()> {
        let mut s = vec![0.0; state.theta.len()];
        self.draw_noise(&state.theta, rng, &mut s)?;
        self.step_with_noise(state, &s)
    }

    /// Noise-free step, used for the deterministic Adam warm-up.
    pub fn step_deterministic(&self, state: &mut OptState) -> Result<()> {
        let zero = vec![0.0; state.theta.len()];
        self.step_with_noise(state, &zero)
    }

    /// Steps from `x0.step` up to step `n_end`, recording `x0` and every
    /// `record_every`-th state after it.
    pub fn run_until(&self, x0: &OptState, n_end: usize, rng: &mut RngStream, record_every: usize) -> Result<Vec<OptState>> {
        assert!(record_every >= 1);
        let mut state = x0.clone();
        let mut out = vec![state.clone()];
        while state.step < n_end {
            self.step(&mut state, rng)?;
            if (state.step - x0.step).is_multiple_of(record_every) {
                out.push(state.clone());
            }
        }
        Ok(out)
    }

    /// Runs to `N = ⌊T/τ⌋`.
    pub fn run(&self, x0: &OptState, rng: &mut RngStream, record_every: usize) -> Result<Vec<OptState>> {
        self.run_until(x0, self.hyper.n_steps(), rng, record_every)
    }

    /// Deterministic iteration from step 0 to `k0`.
    pub fn warm_up(&self, x0: &OptState, k0: usize) -> Result<OptState> {
        let mut state = x0.clone();
        while state.step < k0 {
            self.step_deterministic(&mut state)?;
        }
        Ok(state)
    }
}

/// Trajectory dump with columns `step, t, theta_*, m_* (Adam), u_*`.
pub fn trajectory_csv(traj: &[OptState], tau: f64) -> String {
    let Some(first) = traj.first() else { return String::new() };
    let d = first.theta.len();
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("theta_{i}")));
    if first.m.is_some() {
        header.extend((0..d).map(|i| format!("m_{i}")));
    }
    header.extend((0..d).map(|i| format!("u_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for s in traj {
        let mut row = vec![s.step.to_string(), (s.step as f64 * tau).to_string()];
        row.extend(s.flatten().iter().map(f64::to_string));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
