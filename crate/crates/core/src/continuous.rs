//! Order-1 and order-2 continuous models of the discrete dynamics.
//!
//! Every model acts on the flat state `[θ, u]` (RMSprop) or `[θ, m, u]`
//! (Adam) and is driven by two independent d-dimensional Brownian motions:
//! `W` carries the gradient noise, `B` the fluctuation of its square.
//!
//! Signs of the `W` blocks follow the discrete update (the θ row sees
//! `−σ·diag(P)·Σ^{1/2}`), so each order-1 field is the τ→0 limit of the
//! matching order-2 field. Flipping `W → −W` gives the equivalent form with
//! the opposite overall sign.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::discrete::{phi, phi_prime, Hyper, Optimizer, Regime};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SymMatrix};
use crate::problem::LossModel;

type Buf = SmallVec<[f64; 16]>;

fn buf(d: usize) -> Buf {
    SmallVec::from_elem(0.0, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl std::fmt::Display for Order {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Order::One => "1",
            Order::Two => "2",
        })
    }
}

impl std::str::FromStr for Order {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "1" => Ok(Order::One),
            "2" => Ok(Order::Two),
            _ => Err(format!("unknown order `{s}` (expected 1 or 2)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub optimizer: Optimizer,
    pub regime: Regime,
    pub order: Order,
}

/// An Itô SDE `dX = b(t,X)dt + G_W(t,X)dW + G_B(t,X)dB` with `W` and `B`
/// independent Brownian motions of dimension `noise_dim`.
pub trait SdeModel: Sync {
    fn state_dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    fn t_start(&self) -> f64 {
        0.0
    }

    fn meta(&self) -> Option<ModelMeta> {
        None
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `state_dim × noise_dim`.
    fn diffusion_w(&self, t: f64, x: &[f64]) -> Matrix;

    /// `state_dim × noise_dim`.
    fn diffusion_b(&self, t: f64, x: &[f64]) -> Matrix;

    /// False when `diffusion_w` is identically zero.
    fn has_w(&self) -> bool {
        true
    }

    /// False when `diffusion_b` is identically zero.
    fn has_b(&self) -> bool {
        true
    }

    /// `out = G_W·dw + G_B·db`. Models override this with allocation-free
    /// versions; the default goes through the matrices.
    fn apply_noise(&self, t: f64, x: &[f64], dw: &[f64], db: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.has_w() {
            let v = self.diffusion_w(t, x).mul_vec(dw);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
        if self.has_b() {
            let v = self.diffusion_b(t, x).mul_vec(db);
            out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
        }
    }
}

/// `Σ_{k=1}^{5} λᵏ τ^{k−1} / k`, the truncated series of `−ln(1−λτ)/τ`.
pub fn series_rate(lambda: f64, tau: f64) -> f64 {
    (1..=5).map(|k| lambda.powi(k) * tau.powi(k - 1) / k as f64).sum()
}

/// Continuous bias-correction schedules γ₁, γ₂ and `Γ = √γ₂/γ₁`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleFns {
    pub tau: f64,
    pub rate1: f64,
    pub rate2: f64,
}

impl ScheduleFns {
    pub fn new(lambda1: f64, lambda2: f64, tau: f64) -> Self {
        Self { tau, rate1: series_rate(lambda1, tau), rate2: series_rate(lambda2, tau) }
    }

    /// `γ₁(t) = 1 − exp(−(t+τ) r₁)`.
    pub fn gamma1(&self, t: f64) -> f64 {
        -(-(t + self.tau) * self.rate1).exp_m1()
    }

    /// `γ₂(t) = 1 − exp(−t r₂)`.
    pub fn gamma2(&self, t: f64) -> f64 {
        -(-t * self.rate2).exp_m1()
    }

    pub fn d_gamma1(&self, t: f64) -> f64 {
        self.rate1 * (-(t + self.tau) * self.rate1).exp()
    }

    pub fn d_gamma2(&self, t: f64) -> f64 {
        self.rate2 * (-t * self.rate2).exp()
    }

    pub fn big_gamma(&self, t: f64) -> f64 {
        self.gamma2(t).sqrt() / self.gamma1(t)
    }

    pub fn d_big_gamma(&self, t: f64) -> f64 {
        let (g1, g2) = (self.gamma1(t), self.gamma2(t));
        let s2 = g2.sqrt();
        self.d_gamma2(t) / (2.0 * s2 * g1) - s2 * self.d_gamma1(t) / (g1 * g1)
    }

    /// `Q_t(u) = (√φ(u) + ε√γ₂(t))⁻¹` for an already clamped `φ(u)`.
    pub fn q(&self, t: f64, phi_u: f64, epsilon: f64) -> f64 {
        1.0 / (phi_u.sqrt() + epsilon * self.gamma2(t).sqrt())
    }

    /// `∂_t(Γ_t Q_t(u))` by the product rule.
    pub fn d_gamma_q(&self, t: f64, phi_u: f64, epsilon: f64) -> f64 {
        let q = self.q(t, phi_u, epsilon);
        let dq = -q * q * epsilon * self.d_gamma2(t) / (2.0 * self.gamma2(t).sqrt());
        self.d_big_gamma(t) * q + self.big_gamma(t) * dq
    }
}

/// `γᵢ(t)` for `i ∈ {1, 2}`.
pub fn gamma_continuous(i: u8, t: f64, lambda: f64, tau: f64) -> f64 {
    let s = ScheduleFns::new(lambda, lambda, tau);
    match i {
        1 => s.gamma1(t),
        2 => s.gamma2(t),
        _ => panic!("schedule index must be 1 or 2"),
    }
}

/// Σ-related quantities cached when Σ does not depend on θ.
#[derive(Clone, Debug)]
struct ConstantNoise {
    sigma_d: Vec<f64>,
    s: SymMatrix,
    m_sqrt: SymMatrix,
}

/// One of the eight continuous models.
pub struct ContinuousModel<'a, L: LossModel + ?Sized> {
    meta: ModelMeta,
    hyper: Hyper,
    problem: &'a L,
    schedule: ScheduleFns,
    t_start: f64,
    d: usize,
    cache: Option<ConstantNoise>,
}

pub fn build_order1<'a, L: LossModel + ?Sized>(
    optimizer: Optimizer,
    regime: Regime,
    hyper: Hyper,
    problem: &'a L,
    t_start: f64,
) -> Result<ContinuousModel<'a, L>> {
    ContinuousModel::new(ModelMeta { optimizer, regime, order: Order::One }, hyper, problem, t_start)
}

pub fn build_order2<'a, L: LossModel + ?Sized>(
    optimizer: Optimizer,
    regime: Regime,
    hyper: Hyper,
    problem: &'a L,
    t_start: f64,
) -> Result<ContinuousModel<'a, L>> {
    ContinuousModel::new(ModelMeta { optimizer, regime, order: Order::Two }, hyper, problem, t_start)
}

/// `Σ_{hk} w_hk ∂²_{hk} Σ_ii` from the square-root derivatives.
fn contract_d2_sigma_d<L: LossModel + ?Sized>(problem: &L, theta: &[f64], w: &Matrix) -> Vec<f64> {
    let d = problem.dim();
    let s = problem.sigma_sqrt(theta).expect("Σ is PSD");
    let ds: Vec<Matrix> = (0..d).map(|h| problem.d_sigma_sqrt(theta, h).into_matrix()).collect();
    let mut out = vec![0.0; d];
    for h in 0..d {
        for k in 0..d {
            if w[(h, k)] == 0.0 {
                continue;
            }
            let d2 = problem.d2_sigma_sqrt(theta, h, k).into_matrix();
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += 2.0 * d2[(i, j)] * s[(j, i)] + ds[h][(i, j)] * ds[k][(j, i)] + ds[k][(i, j)] * ds[h][(j, i)];
                }
                *o += w[(h, k)] * acc;
            }
        }
    }
    out
}

/// `W_hk = P_h P_k Σ_hk`.
fn weighted_sigma(sigma: &SymMatrix, p: &[f64]) -> Matrix {
    Matrix::from_fn(p.len(), p.len(), |h, k| p[h] * p[k] * sigma[(h, k)])
}

fn preconditioner(u: &[f64], hyper: &Hyper) -> (Vec<f64>, Vec<f64>) {
    let c = hyper.phi_threshold;
    let p = u.iter().map(|&x| 1.0 / (phi(x, c).sqrt() + hyper.epsilon)).collect();
    let r = u.iter().map(|&x| phi_prime(x, c) / phi(x, c).sqrt()).collect();
    (p, r)
}

/// Order-τ correction `Λ₁` to the θ-row diffusion of batch-equivalent
/// RMSprop, in the convention where the leading θ diffusion is
/// `+σ·diag(P)·Σ^{1/2}`.
pub fn eval_lambda1<L: LossModel + ?Sized>(problem: &L, theta: &[f64], u: &[f64], hyper: &Hyper) -> Result<Matrix> {
    let d = problem.dim();
    let sigma = hyper.sigma;
    let lam = hyper.lambda0;
    let (p, r) = preconditioner(u, hyper);
    let s = problem.sigma_sqrt(theta)?;
    let sd = problem.sigma_d(theta);
    let sm = s.as_matrix();

    // ½σ diag(P) ∇²f diag(P) Σ^{1/2}
    let mut hp = Matrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = p[j];
        let col = problem.hess_mul(theta, &e);
        for i in 0..d {
            hp[(i, j)] = p[i] * col[i];
        }
    }
    let mut out = hp.matmul(sm).scaled(0.5 * sigma);

    // ¼λσ diag(P²⊙φ′/√φ⊙(σ²Σ_d − u)) Σ^{1/2}
    let coef: Vec<f64> = (0..d).map(|i| p[i] * p[i] * r[i] * (sigma * sigma * sd[i] - u[i])).collect();
    out.add_scaled(0.25 * lam * sigma, &sm.scale_rows(&coef));

    if !problem.constant_covariance() {
        let g = problem.grad_f(theta);
        let v: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a * b).collect();
        let w = weighted_sigma(&problem.sigma(theta), &p);
        let ds: Vec<Matrix> = (0..d).map(|h| problem.d_sigma_sqrt(theta, h).into_matrix()).collect();
        let mut first = Matrix::zeros(d, d);
        let mut second = Matrix::zeros(d, d);
        let mut quad = Matrix::zeros(d, d);
        for h in 0..d {
            first.add_scaled(v[h], &ds[h]);
            for k in 0..d {
                if w[(h, k)] != 0.0 {
                    second.add_scaled(w[(h, k)], problem.d2_sigma_sqrt(theta, h, k).as_matrix());
                    quad.add_scaled(w[(h, k)], &ds[h].matmul(&ds[k]));
                }
            }
        }
        out.add_scaled(0.5 * sigma, &first.scale_rows(&p));
        out.add_scaled(-0.25 * sigma.powi(3), &second.scale_rows(&p));
        if !quad.is_zero() {
            let s_inv = problem.sigma_sqrt_inv(theta)?;
            out.add_scaled(-0.25 * sigma.powi(3), &quad.scale_rows(&p).matmul(s_inv.as_matrix()));
        }
    }
    Ok(out)
}

/// Order-τ u-row diffusion `Λ₂` of batch-equivalent RMSprop, same
/// convention as [`eval_lambda1`].
pub fn eval_lambda2<L: LossModel + ?Sized>(problem: &L, theta: &[f64], u: &[f64], hyper: &Hyper) -> Result<Matrix> {
    let sigma = hyper.sigma;
    let lam = hyper.lambda0;
    let s = problem.sigma_sqrt(theta)?;
    let g = problem.grad_f(theta);
    let mut out = s.as_matrix().scale_rows(&g).scaled(-2.0 * lam * sigma);
    if !problem.constant_covariance() {
        let (p, _) = preconditioner(u, hyper);
        let jac = problem.grad_sigma_d(theta);
        out.add_scaled(-0.5 * lam * sigma.powi(3), &jac.scale_cols(&p).matmul(s.as_matrix()));
    }
    Ok(out)
}

impl<'a, L: LossModel + ?Sized> ContinuousModel<'a, L> {
    pub fn new(meta: ModelMeta, hyper: Hyper, problem: &'a L, t_start: f64) -> Result<Self> {
        if meta.optimizer == Optimizer::Adam && !(t_start > 0.0) {
            return Err(Error::InvalidStart { t_start });
        }
        let d = problem.dim();
        let cache = if problem.constant_covariance() {
            let theta = vec![0.0; d];
            Some(ConstantNoise {
                sigma_d: problem.sigma_d(&theta),
                s: problem.sigma_sqrt(&theta)?,
                m_sqrt: problem.m_sqrt(&theta)?,
            })
        } else {
            None
        };
        Ok(Self {
            meta,
            hyper,
            problem,
            schedule: ScheduleFns::new(hyper.lambda1, hyper.lambda2, hyper.tau),
            t_start,
            d,
            cache,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn schedule(&self) -> &ScheduleFns {
        &self.schedule
    }

    fn lambda_u(&self) -> f64 {
        match self.meta.optimizer {
            Optimizer::Rmsprop => self.hyper.lambda0,
            Optimizer::Adam => self.hyper.lambda2,
        }
    }

    fn u_offset(&self) -> usize {
        match self.meta.optimizer {
            Optimizer::Rmsprop => self.d,
            Optimizer::Adam => 2 * self.d,
        }
    }

    fn sigma_d(&self, theta: &[f64]) -> Buf {
        match &self.cache {
            Some(c) => Buf::from_slice(&c.sigma_d),
            None => Buf::from_vec(self.problem.sigma_d(theta)),
        }
    }

    fn sigma_sqrt(&self, theta: &[f64]) -> SymMatrix {
        match &self.cache {
            Some(c) => c.s.clone(),
            None => self.problem.sigma_sqrt(theta).expect("Σ is PSD"),
        }
    }

    fn m_sqrt(&self, theta: &[f64]) -> SymMatrix {
        match &self.cache {
            Some(c) => c.m_sqrt.clone(),
            None => self.problem.m_sqrt(theta).expect("M is PSD"),
        }
    }

    /// `φ(u)`, the preconditioner (P or Q_t) and `φ′/√φ`, entrywise.
    fn precond(&self, t: f64, u: &[f64]) -> (Buf, Buf) {
        let c = self.hyper.phi_threshold;
        let shift = match self.meta.optimizer {
            Optimizer::Rmsprop => self.hyper.epsilon,
            Optimizer::Adam => self.hyper.epsilon * self.schedule.gamma2(t).sqrt(),
        };
        let mut p = buf(self.d);
        let mut r = buf(self.d);
        for i in 0..self.d {
            let f = phi(u[i], c);
            p[i] = 1.0 / (f.sqrt() + shift);
            r[i] = phi_prime(u[i], c) / f.sqrt();
        }
        (p, r)
    }

    /// `∇Σ_d · v`, zero for constant covariance.
    fn grad_sigma_d_mul(&self, theta: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        if self.cache.is_some() {
            None
        } else {
            Some(self.problem.grad_sigma_d(theta).mul_vec(v))
        }
    }

    fn rmsprop_drift(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (tau, lam, s2) = (self.hyper.tau, self.hyper.lambda0, self.hyper.sigma * self.hyper.sigma);
        let theta = &x[..d];
        let u = &x[d..2 * d];
        let mut g = buf(d);
        self.problem.grad_f_into(theta, &mut g);
        let sd = self.sigma_d(theta);
        let (p, r) = self.precond(0.0, u);
        let balistic = self.meta.regime == Regime::Balistic;
        // J = ∇f² + σ²Σ_d (balistic) or K = σ²Σ_d (batch-equivalent).
        let mut target = buf(d);
        for i in 0..d {
            target[i] = s2 * sd[i] + if balistic { g[i] * g[i] } else { 0.0 };
            out[i] = -g[i] * p[i];
            out[d + i] = lam * (target[i] - u[i]);
        }
        if self.meta.order == Order::One {
            return;
        }
        let mut v = buf(d);
        for i in 0..d {
            v[i] = g[i] * p[i];
        }
        let mut hv = buf(d);
        self.problem.hess_mul_into(theta, &v, &mut hv);
        let grad_sd_v = self.grad_sigma_d_mul(theta, &v);
        for i in 0..d {
            let corr = p[i] * hv[i] + 0.5 * lam * p[i] * p[i] * r[i] * (target[i] - u[i]) * g[i];
            out[i] += -0.5 * tau * corr;
        }
        if balistic {
            for i in 0..d {
                let grad_j_v = 2.0 * g[i] * hv[i] + grad_sd_v.as_ref().map_or(0.0, |w| s2 * w[i]);
                out[d + i] += 0.5 * tau * lam * (lam * (target[i] - u[i]) + grad_j_v);
            }
        } else {
            for i in 0..d {
                out[d + i] += tau * (lam * g[i] * g[i] + 0.5 * lam * lam * (target[i] - u[i]));
            }
            if let Some(w) = grad_sd_v {
                for i in 0..d {
                    out[d + i] += tau * 0.5 * lam * s2 * w[i];
                }
            }
            let needs_third = !self.problem.quadratic();
            let needs_d2 = self.cache.is_none();
            if needs_third || needs_d2 {
                let wmat = weighted_sigma(&self.problem.sigma(theta), &p);
                if needs_third {
                    let tc = self.problem.third_contract(theta, &wmat);
                    for i in 0..d {
                        out[i] += tau * 0.25 * s2 * p[i] * tc[i];
                    }
                }
                if needs_d2 {
                    let c2 = contract_d2_sigma_d(self.problem, theta, &wmat);
                    for i in 0..d {
                        out[d + i] -= tau * 0.25 * lam * s2 * s2 * c2[i];
                    }
                }
            }
        }
    }

    fn adam_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let h = &self.hyper;
        let (tau, l1, l2, s2) = (h.tau, h.lambda1, h.lambda2, h.sigma * h.sigma);
        let theta = &x[..d];
        let m = &x[d..2 * d];
        let u = &x[2 * d..3 * d];
        let mut g = buf(d);
        self.problem.grad_f_into(theta, &mut g);
        let sd = self.sigma_d(theta);
        let (q, r) = self.precond(t, u);
        let big_gamma = self.schedule.big_gamma(t);
        let balistic = self.meta.regime == Regime::Balistic;
        let mut target = buf(d);
        for i in 0..d {
            target[i] = s2 * sd[i] + if balistic { g[i] * g[i] } else { 0.0 };
            out[i] = -big_gamma * m[i] * q[i];
            out[d + i] = l1 * (g[i] - m[i]);
            out[2 * d + i] = l2 * (target[i] - u[i]);
        }
        if self.meta.order == Order::One {
            return;
        }
        let mut w = buf(d);
        for i in 0..d {
            w[i] = m[i] * q[i];
        }
        let mut hw = buf(d);
        self.problem.hess_mul_into(theta, &w, &mut hw);
        let grad_sd_w = self.grad_sigma_d_mul(theta, &w);
        for i in 0..d {
            let phi_u = phi(u[i], h.phi_threshold);
            let dgq = self.schedule.d_gamma_q(t, phi_u, h.epsilon);
            out[i] += tau
                * (-0.5 * l1 * big_gamma * (g[i] - m[i]) * q[i]
                    - 0.25 * l2 * big_gamma * q[i] * q[i] * r[i] * m[i] * (target[i] - u[i])
                    + 0.5 * m[i] * dgq);
            out[d + i] += tau * (0.5 * l1 * big_gamma * hw[i] + 0.5 * l1 * l1 * (g[i] - m[i]));
            let gsd = grad_sd_w.as_ref().map_or(0.0, |v| s2 * v[i]);
            out[2 * d + i] += if balistic {
                0.5 * tau * l2 * (l2 * (target[i] - u[i]) + big_gamma * (2.0 * g[i] * hw[i] + gsd))
            } else {
                tau * (l2 * g[i] * g[i] + 0.5 * l2 * big_gamma * gsd + 0.5 * l2 * l2 * (target[i] - u[i]))
            };
        }
    }

    /// `Σ_h w_h ∂_h Σ^{1/2}`, or `None` when Σ is constant.
    fn directional_d_sigma_sqrt(&self, theta: &[f64], w: &[f64]) -> Option<Matrix> {
        if self.cache.is_some() {
            return None;
        }
        let mut acc = Matrix::zeros(self.d, self.d);
        for (h, &wh) in w.iter().enumerate() {
            if wh != 0.0 {
                acc.add_scaled(wh, self.problem.d_sigma_sqrt(theta, h).as_matrix());
            }
        }
        Some(acc)
    }

    /// Entrywise `y = G_W(t,x)·dw` for constant Σ, given `sw = Σ^{1/2}dw`.
    fn apply_w_constant(&self, t: f64, x: &[f64], sw: &[f64], out: &mut [f64]) {
        let d = self.d;
        let h = &self.hyper;
        let (tau, sig) = (h.tau, h.sigma);
        let st = tau.sqrt();
        let theta = &x[..d];
        let uo = self.u_offset();
        let u = &x[uo..uo + d];
        let mut g = buf(d);
        self.problem.grad_f_into(theta, &mut g);
        let lam = self.lambda_u();
        let two = self.meta.order == Order::Two;
        match (self.meta.optimizer, self.meta.regime) {
            (Optimizer::Rmsprop, Regime::Balistic) => {
                if two {
                    let (p, _) = self.precond(t, u);
                    for i in 0..d {
                        out[i] += -st * sig * p[i] * sw[i];
                        out[d + i] += 2.0 * st * lam * sig * g[i] * sw[i];
                    }
                }
            }
            (Optimizer::Rmsprop, Regime::BatchEquivalent) => {
                let (p, r) = self.precond(t, u);
                for i in 0..d {
                    out[i] += -sig * p[i] * sw[i];
                }
                if two {
                    let sd = self.sigma_d(theta);
                    let mut psw = buf(d);
                    for i in 0..d {
                        psw[i] = p[i] * sw[i];
                    }
                    let mut hpsw = buf(d);
                    self.problem.hess_mul_into(theta, &psw, &mut hpsw);
                    for i in 0..d {
                        let l1 = 0.5 * sig * p[i] * hpsw[i]
                            + 0.25 * lam * sig * p[i] * p[i] * r[i] * (sig * sig * sd[i] - u[i]) * sw[i];
                        out[i] -= tau * l1;
                        out[d + i] += 2.0 * tau * lam * sig * g[i] * sw[i];
                    }
                }
            }
            (Optimizer::Adam, regime) => {
                let l1 = h.lambda1;
                let balistic = regime == Regime::Balistic;
                if balistic && !two {
                    return;
                }
                let m_scale = match (balistic, two) {
                    (true, _) => st * l1 * sig,
                    (false, false) => l1 * sig,
                    (false, true) => l1 * sig + 0.5 * tau * l1 * l1 * sig,
                };
                for i in 0..d {
                    out[d + i] += m_scale * sw[i];
                }
                if two {
                    let u_scale = if balistic { st } else { tau };
                    for i in 0..d {
                        out[2 * d + i] += 2.0 * u_scale * lam * sig * g[i] * sw[i];
                    }
                    if !balistic {
                        let (q, _) = self.precond(t, u);
                        let big_gamma = self.schedule.big_gamma(t);
                        for i in 0..d {
                            out[i] += -0.5 * tau * l1 * sig * big_gamma * q[i] * sw[i];
                        }
                    }
                }
            }
        }
    }
}

impl<L: LossModel + ?Sized> SdeModel for ContinuousModel<'_, L> {
    fn state_dim(&self) -> usize {
        match self.meta.optimizer {
            Optimizer::Rmsprop => 2 * self.d,
            Optimizer::Adam => 3 * self.d,
        }
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn t_start(&self) -> f64 {
        self.t_start
    }

    fn meta(&self) -> Option<ModelMeta> {
        Some(self.meta)
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self.meta.optimizer {
            Optimizer::Rmsprop => self.rmsprop_drift(x, out),
            Optimizer::Adam => self.adam_drift(t, x, out),
        }
    }

    fn diffusion_w(&self, t: f64, x: &[f64]) -> Matrix {
        let d = self.d;
        let mut out = Matrix::zeros(self.state_dim(), d);
        if !self.has_w() {
            return out;
        }
        let h = &self.hyper;
        let (tau, sig) = (h.tau, h.sigma);
        let st = tau.sqrt();
        let theta = &x[..d];
        let uo = self.u_offset();
        let u = &x[uo..uo + d];
        let s = self.sigma_sqrt(theta);
        let sm = s.as_matrix();
        let g = self.problem.grad_f(theta);
        let lam = self.lambda_u();
        let two = self.meta.order == Order::Two;
        let (pre, _) = self.precond(t, u);
        match (self.meta.optimizer, self.meta.regime) {
            (Optimizer::Rmsprop, Regime::Balistic) => {
                out.set_block(0, 0, &sm.scale_rows(&pre).scaled(-st * sig));
                out.set_block(d, 0, &sm.scale_rows(&g).scaled(2.0 * st * lam * sig));
            }
            (Optimizer::Rmsprop, Regime::BatchEquivalent) => {
                let mut theta_block = sm.scale_rows(&pre).scaled(-sig);
                if two {
                    let nan = || Matrix::from_fn(d, d, |_, _| f64::NAN);
                    let l1 = eval_lambda1(self.problem, theta, u, h).unwrap_or_else(|_| nan());
                    let l2 = eval_lambda2(self.problem, theta, u, h).unwrap_or_else(|_| nan());
                    theta_block.add_scaled(-tau, &l1);
                    out.set_block(d, 0, &l2.scaled(-tau));
                }
                out.set_block(0, 0, &theta_block);
            }
            (Optimizer::Adam, regime) => {
                let l1 = h.lambda1;
                let balistic = regime == Regime::Balistic;
                let mut m_block = sm.scaled(if balistic { st * l1 * sig } else { l1 * sig });
                if two {
                    let u_scale = if balistic { st } else { tau };
                    out.set_block(2 * d, 0, &sm.scale_rows(&g).scaled(2.0 * u_scale * lam * sig));
                    if !balistic {
                        let big_gamma = self.schedule.big_gamma(t);
                        out.set_block(0, 0, &sm.scale_rows(&pre).scaled(-0.5 * tau * l1 * sig * big_gamma));
                        m_block.add_scaled(0.5 * tau * l1 * l1 * sig, sm);
                        let w: Vec<f64> = x[d..2 * d].iter().zip(pre.iter()).map(|(a, b)| a * b).collect();
                        if let Some(ds) = self.directional_d_sigma_sqrt(theta, &w) {
                            m_block.add_scaled(0.5 * tau * l1 * sig * big_gamma, &ds);
                        }
                    }
                }
                out.set_block(d, 0, &m_block);
            }
        }
        out
    }

    fn diffusion_b(&self, _t: f64, x: &[f64]) -> Matrix {
        let d = self.d;
        let mut out = Matrix::zeros(self.state_dim(), d);
        if self.has_b() {
            let s2 = self.hyper.sigma * self.hyper.sigma;
            let block = self.m_sqrt(&x[..d]).into_matrix().scaled(self.hyper.tau.sqrt() * self.lambda_u() * s2);
            out.set_block(self.u_offset(), 0, &block);
        }
        out
    }

    fn has_w(&self) -> bool {
        !(self.meta.order == Order::One && self.meta.regime == Regime::Balistic)
    }

    fn has_b(&self) -> bool {
        self.meta.order == Order::Two
    }

    fn apply_noise(&self, t: f64, x: &[f64], dw: &[f64], db: &[f64], out: &mut [f64]) {
        let Some(cache) = &self.cache else {
            out.iter_mut().for_each(|o| *o = 0.0);
            if self.has_w() {
                let v = self.diffusion_w(t, x).mul_vec(dw);
                out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            }
            if self.has_b() {
                let v = self.diffusion_b(t, x).mul_vec(db);
                out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
            }
            return;
        };
        let d = self.d;
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.has_w() {
            let mut sw = buf(d);
            cache.s.mul_vec_into(dw, &mut sw);
            self.apply_w_constant(t, x, &sw, out);
        }
        if self.has_b() {
            let mut sb = buf(d);
            cache.m_sqrt.mul_vec_into(db, &mut sb);
            let scale = self.hyper.tau.sqrt() * self.lambda_u() * self.hyper.sigma * self.hyper.sigma;
            let uo = self.u_offset();
            for i in 0..d {
                out[uo + i] += scale * sb[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::{big_gamma_bar, gamma_bar};
    use crate::numerics::{namespace, RngStream};
    use crate::problem::{generate_problem, QuadraticGaussianProblem};

    #[test]
    fn gamma2_starts_at_zero() {
        assert_eq!(gamma_continuous(2, 0.0, 1.0, 0.1), 0.0);
    }

    #[test]
    fn gamma2_small_tau_limit() {
        let v = gamma_continuous(2, 1.0, 1.0, 1e-6);
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-5);
    }

    #[test]
    fn rate_matches_log_series() {
        let exact = -(0.9f64.ln()) / 0.1;
        assert!((series_rate(1.0, 0.1) - exact).abs() < 2e-6);
    }

    #[test]
    fn discrete_and_continuous_schedules_pair_up() {
        let tau = 0.125;
        let s = ScheduleFns::new(1.0, 1.0, tau);
        let h = Hyper::new(tau, 5.0);
        for k in 1..40 {
            let t = k as f64 * tau;
            assert!((gamma_bar(1.0, k, tau) - s.gamma2(t)).abs() < 1e-4);
            assert!((gamma_bar(1.0, k + 1, tau) - s.gamma1(t)).abs() < 1e-4);
            assert!((big_gamma_bar(k, &h) - s.big_gamma(t)).abs() < 1e-3);
        }
    }

    #[test]
    fn d_gamma_q_matches_finite_difference() {
        let s = ScheduleFns::new(1.0, 0.7, 0.1);
        let (phi_u, eps) = (0.3, 0.05);
        let f = |t: f64| s.big_gamma(t) * s.q(t, phi_u, eps);
        let hh = 1e-5;
        let fd = (f(1.0 + hh) - f(1.0 - hh)) / (2.0 * hh);
        assert!((fd - s.d_gamma_q(1.0, phi_u, eps)).abs() < 1e-8);
    }

    fn scalar_problem() -> QuadraticGaussianProblem {
        QuadraticGaussianProblem::population(SymMatrix::identity(1))
    }

    #[test]
    fn rmsprop_balistic_scalar_drift() {
        let p = scalar_problem();
        let h = Hyper { epsilon: 1.0, ..Hyper::new(0.1, 1.0) };
        let model = build_order1(Optimizer::Rmsprop, Regime::Balistic, h, &p, 0.0).unwrap();
        let mut out = [0.0; 2];
        model.drift(0.0, &[1.0, 1.0], &mut out);
        assert!((out[0] + 0.5).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_balistic_equilibrium() {
        let p = generate_problem(3, 1, 2, 500);
        let h = Hyper { lambda0: 0.5, ..Hyper::new(0.1, 1.0) };
        let model = build_order1(Optimizer::Rmsprop, Regime::Balistic, h, &p, 0.0).unwrap();
        let mut x = p.mean().to_vec();
        x.extend(p.sigma_d(&[0.0; 3]));
        let mut out = [0.0; 6];
        model.drift(0.0, &x, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-14), "{out:?}");
    }

    #[test]
    fn adam_requires_positive_start() {
        let p = scalar_problem();
        let r = build_order1(Optimizer::Adam, Regime::Balistic, Hyper::new(0.1, 1.0), &p, 0.0);
        assert!(matches!(r, Err(Error::InvalidStart { .. })));
    }

    #[test]
    fn adam_batch_equivalent_order1_m_block_is_constant() {
        let p = generate_problem(3, 1, 2, 500);
        let h = Hyper { lambda1: 0.8, sigma: 1.3, ..Hyper::new(0.1, 1.0) };
        let model = build_order1(Optimizer::Adam, Regime::BatchEquivalent, h, &p, 0.2).unwrap();
        let s = p.sigma_sqrt(&[0.0; 3]).unwrap().into_matrix().scaled(0.8 * 1.3);
        let mut rng = RngStream::new(1, namespace::TEST, 0);
        for _ in 0..5 {
            let x: Vec<f64> = (0..9).map(|_| rng.normal().abs()).collect();
            let g = model.diffusion_w(0.5, &x);
            assert!(g.block(3, 0, 3, 3).max_abs_diff(&s) < 1e-15);
            assert!(g.block(0, 0, 3, 3).is_zero() && g.block(6, 0, 3, 3).is_zero());
            assert!(model.diffusion_b(0.5, &x).is_zero());
        }
    }

    #[test]
    fn fast_noise_matches_matrices() {
        let p = generate_problem(4, 3, 4, 1000);
        let h = Hyper { lambda0: 0.7, lambda1: 0.9, lambda2: 0.6, sigma: 1.2, ..Hyper::new(0.1, 1.0) };
        let mut rng = RngStream::new(2, namespace::TEST, 0);
        for opt in [Optimizer::Rmsprop, Optimizer::Adam] {
            for regime in [Regime::Balistic, Regime::BatchEquivalent] {
                for order in [Order::One, Order::Two] {
                    let model = ContinuousModel::new(ModelMeta { optimizer: opt, regime, order }, h, &p, 0.3).unwrap();
                    let n = model.state_dim();
                    let x: Vec<f64> = (0..n).map(|i| if i >= n - 4 { 0.05 + rng.normal().abs() } else { rng.normal() }).collect();
                    let dw: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                    let db: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                    let mut fast = vec![0.0; n];
                    model.apply_noise(0.7, &x, &dw, &db, &mut fast);
                    let mut slow = model.diffusion_w(0.7, &x).mul_vec(&dw);
                    for (s, b) in slow.iter_mut().zip(model.diffusion_b(0.7, &x).mul_vec(&db)) {
                        *s += b;
                    }
                    let diff = fast.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    assert!(diff < 1e-13, "{opt:?} {regime:?} {order:?}: {diff}");
                }
            }
        }
    }

    #[test]
    fn order1_balistic_has_no_noise() {
        let p = generate_problem(3, 1, 2, 500);
        let mut rng = RngStream::new(5, namespace::TEST, 0);
        for opt in [Optimizer::Rmsprop, Optimizer::Adam] {
            let model = build_order1(opt, Regime::Balistic, Hyper::new(0.1, 1.0), &p, 0.2).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..model.state_dim()).map(|_| rng.normal()).collect();
                assert!(model.diffusion_w(0.5, &x).is_zero());
                assert!(model.diffusion_b(0.5, &x).is_zero());
            }
        }
    }

    #[test]
    fn rmsprop_balistic_order2_drift_double_entry() {
        let p = generate_problem(4, 7, 8, 2000);
        let h = Hyper { lambda0: 1.0, ..Hyper::new(0.05, 1.0) };
        let m1 = build_order1(Optimizer::Rmsprop, Regime::Balistic, h, &p, 0.0).unwrap();
        let m2 = build_order2(Optimizer::Rmsprop, Regime::Balistic, h, &p, 0.0).unwrap();
        let theta = [0.3, -0.7, 1.1, 0.2];
        let u = [0.5, 1.5, 0.02, 2.0];
        let x: Vec<f64> = theta.iter().chain(&u).copied().collect();
        let (mut a, mut b) = (vec![0.0; 8], vec![0.0; 8]);
        m1.drift(0.0, &x, &mut a);
        m2.drift(0.0, &x, &mut b);
        // −(τ/2)(P⊙H(P⊙∇f) + ½P²⊙(φ′/√φ)⊙(J−u)⊙∇f), written out separately.
        let g = p.grad_f(&theta);
        let sd = p.sigma_d(&theta);
        let pv: Vec<f64> = u.iter().map(|&x: &f64| 1.0 / (x.max(h.tau).sqrt() + h.epsilon)).collect();
        let pg: Vec<f64> = (0..4).map(|i| pv[i] * g[i]).collect();
        let hpg = p.h().mul_vec(&pg);
        for i in 0..4 {
            let j = g[i] * g[i] + sd[i];
            let rr = if u[i] > h.tau { 1.0 / u[i].sqrt() } else { 0.0 };
            let expected = -(h.tau / 2.0) * (pv[i] * hpg[i] + 0.5 * pv[i] * pv[i] * rr * (j - u[i]) * g[i]);
            assert!((b[i] - a[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_reductions_for_constant_sigma() {
        let p = generate_problem(3, 2, 3, 1000);
        let h = Hyper { sigma: 1.1, lambda0: 0.8, ..Hyper::new(0.1, 1.0) };
        let theta = [0.4, -0.2, 0.9];
        let u = [0.3, 0.05, 1.2];
        let s = p.sigma_sqrt(&theta).unwrap().into_matrix();
        let g = p.grad_f(&theta);
        let l2 = eval_lambda2(&p, &theta, &u, &h).unwrap();
        assert_eq!(l2, s.scale_rows(&g).scaled(-2.0 * 0.8 * 1.1));

        let l1 = eval_lambda1(&p, &theta, &u, &h).unwrap();
        let pv: Vec<f64> = u.iter().map(|&x| 1.0 / (x.max(0.1).sqrt() + h.epsilon)).collect();
        let hm = p.h().as_matrix();
        let first = hm.scale_rows(&pv).scale_cols(&pv).matmul(&s).scaled(0.5 * 1.1);
        let sd = p.sigma_d(&theta);
        let coef: Vec<f64> = (0..3)
            .map(|i| {
                let rr = if u[i] > 0.1 { 1.0 / u[i].sqrt() } else { 0.0 };
                0.25 * 0.8 * 1.1 * pv[i] * pv[i] * rr * (1.21 * sd[i] - u[i])
            })
            .collect();
        let mut expected = first;
        expected.add_scaled(1.0, &s.scale_rows(&coef));
        assert!(l1.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn lambda_scalar_hand_values() {
        // d = 1, H = 1, population mode: Σ = 1, ∇f(1) = 1, P = ½, u = 1 > c.
        let p = scalar_problem();
        let h = Hyper { epsilon: 1.0, ..Hyper::new(0.1, 1.0) };
        let l1 = eval_lambda1(&p, &[1.0], &[1.0], &h).unwrap();
        // ½·½·1·½·1 + ¼·¼·1·(1 − 1) = 0.125
        assert!((l1[(0, 0)] - 0.125).abs() < 1e-12);
        let l1 = eval_lambda1(&p, &[1.0], &[0.5], &h).unwrap();
        let pp = 1.0 / (0.5f64.sqrt() + 1.0);
        let expected = 0.5 * pp * pp + 0.25 * pp * pp / 0.5f64.sqrt() * 0.5;
        assert!((l1[(0, 0)] - expected).abs() < 1e-12);
        let l2 = eval_lambda2(&p, &[1.0], &[1.0], &h).unwrap();
        assert!((l2[(0, 0)] + 2.0).abs() < 1e-12);
    }
}
