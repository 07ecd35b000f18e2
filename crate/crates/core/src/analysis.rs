//! Weak-error measurement, slope sweeps, the one-step moment oracle and the
//! toy-model invariance statistics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::continuous::{ContinuousModel, ModelMeta, Order, SdeModel};
use crate::discrete::{big_gamma_bar, gamma_bar, phi, DiscreteDynamics, Hyper, NoiseMode, OptState, Optimizer, Regime};
use crate::error::{Error, Result};
use crate::numerics::{loglog_slope, namespace, Matrix, RngStream};
use crate::problem::LossModel;
use crate::simulate::{ensemble_mean, DiscreteSource, EnsembleEstimate, IntegrationPlan, PathSource, SdeSource, Welford};

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum TestKind {
    MeanSquare { offset: usize, len: usize },
    Constant(f64),
    Custom(ScalarFn),
}

/// A scalar observable of the flat state.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    kind: TestKind,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).finish()
    }
}

impl TestFunction {
    /// `‖x[offset..offset+len]‖² / len`, quadratic growth.
    pub fn mean_square(name: impl Into<String>, offset: usize, len: usize) -> Self {
        Self { name: name.into(), kind: TestKind::MeanSquare { offset, len } }
    }

    pub fn constant(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), kind: TestKind::Constant(value) }
    }

    pub fn custom(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), kind: TestKind::Custom(Arc::new(f)) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TestKind::MeanSquare { offset, len } => x[*offset..offset + len].iter().map(|v| v * v).sum::<f64>() / *len as f64,
            TestKind::Constant(c) => *c,
            TestKind::Custom(f) => f(x),
        }
    }
}

/// `f1 = ‖θ‖²/d`, then `f2 = ‖u‖²/d` (RMSprop) or `f2 = ‖m‖²/d`,
/// `f3 = ‖u‖²/d` (Adam).
pub fn standard_test_functions(optimizer: Optimizer, d: usize) -> Vec<TestFunction> {
    match optimizer {
        Optimizer::Rmsprop => vec![TestFunction::mean_square("f1", 0, d), TestFunction::mean_square("f2", d, d)],
        Optimizer::Adam => vec![
            TestFunction::mean_square("f1", 0, d),
            TestFunction::mean_square("f2", d, d),
            TestFunction::mean_square("f3", 2 * d, d),
        ],
    }
}

/// Weak error of one test function at one τ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorRow {
    pub function: String,
    pub tau: f64,
    pub times: Vec<f64>,
    /// `|Ê[g(X_{kτ})] − Ê[g(x_k)]|` per record.
    pub errors: Vec<f64>,
    pub max_error: f64,
    /// `√(se_d² + se_c²)` at the argmax.
    pub stderr: f64,
    /// Per-side standard errors at the argmax.
    pub stderr_d: f64,
    pub stderr_c: f64,
    pub argmax_time: f64,
    pub n_paths_d: usize,
    pub n_paths_c: usize,
}

/// Per-record comparison of two ensembles observed at the same `times`.
pub fn compare_estimates(tau: f64, times: &[f64], a: &EnsembleEstimate, b: &EnsembleEstimate) -> Result<Vec<WeakErrorRow>> {
    if a.names != b.names || a.mean.iter().zip(&b.mean).any(|(x, y)| x.len() != y.len() || x.len() != times.len()) {
        return Err(Error::Validation("ensembles are not comparable".into()));
    }
    let rows = a
        .names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let errors: Vec<f64> = a.mean[f].iter().zip(&b.mean[f]).map(|(x, y)| (x - y).abs()).collect();
            let (arg, &max_error) = errors
                .iter()
                .enumerate()
                .fold((0, &0.0), |best, (j, e)| if *e > *best.1 { (j, e) } else { best });
            let stderr = (a.stderr[f][arg].powi(2) + b.stderr[f][arg].powi(2)).sqrt();
            WeakErrorRow {
                function: name.clone(),
                tau,
                times: times.to_vec(),
                errors,
                max_error,
                stderr,
                stderr_d: a.stderr[f][arg],
                stderr_c: b.stderr[f][arg],
                argmax_time: times.get(arg).copied().unwrap_or(0.0),
                n_paths_d: a.n_paths,
                n_paths_c: b.n_paths,
            }
        })
        .collect();
    Ok(rows)
}

/// Weak error between two arbitrary path sources.
pub fn weak_error_between(
    tau: f64,
    times: &[f64],
    a: &dyn PathSource,
    b: &dyn PathSource,
    fns: &[TestFunction],
    n_a: usize,
    n_b: usize,
) -> Result<Vec<WeakErrorRow>> {
    let ea = ensemble_mean(a, fns, n_a)?;
    let eb = ensemble_mean(b, fns, n_b)?;
    compare_estimates(tau, times, &ea, &eb)
}

/// Everything needed to compare a discrete run with a continuous model.
#[derive(Clone)]
pub struct WeakErrorSetup<'a, L: LossModel + ?Sized> {
    pub meta: ModelMeta,
    pub hyper: Hyper,
    pub problem: &'a L,
    pub noise: NoiseMode,
    /// State at step 0.
    pub x0: OptState,
    /// Adam: end of the deterministic warm-up (rounded to the τ grid).
    pub t_start: f64,
    /// Integrator step; `None` means τ².
    pub dt: Option<f64>,
    pub n_paths_d: usize,
    pub n_paths_c: usize,
    pub seed_d: u64,
    pub seed_c: u64,
    /// Antithetic `(W, B) ↦ (−W, −B)` pairs on the continuous side.
    pub antithetic: bool,
    pub test_functions: Vec<TestFunction>,
}

impl<L: LossModel + ?Sized> WeakErrorSetup<'_, L> {
    pub fn start_step(&self) -> usize {
        (self.t_start / self.hyper.tau).round() as usize
    }

    /// The shared initial condition: the deterministic warm-up iterate at
    /// the start step.
    pub fn initial_state(&self) -> Result<OptState> {
        let dynamics = DiscreteDynamics::new(self.meta.optimizer, self.meta.regime, self.hyper, self.problem, NoiseMode::Off)?;
        dynamics.warm_up(&self.x0, self.start_step())
    }
}

/// Ensemble comparison of the discrete iteration and the continuous model at
/// times `kτ`, from the start step to `⌊T/τ⌋`.
pub fn weak_error<L: LossModel + ?Sized>(setup: &WeakErrorSetup<'_, L>) -> Result<Vec<WeakErrorRow>> {
    setup.hyper.validate()?;
    let tau = setup.hyper.tau;
    let k0 = setup.start_step();
    let n = setup.hyper.n_steps();
    if k0 > n {
        return Err(Error::Validation("start step lies beyond the horizon".into()));
    }
    let start = setup.initial_state()?;
    let t0 = k0 as f64 * tau;
    let dynamics = DiscreteDynamics::new(setup.meta.optimizer, setup.meta.regime, setup.hyper, setup.problem, setup.noise)?;
    let discrete = DiscreteSource::new(dynamics, start.clone(), n, setup.seed_d);
    let model = ContinuousModel::new(setup.meta, setup.hyper, setup.problem, t0)?;
    let dt = setup.dt.unwrap_or(tau * tau);
    let plan = IntegrationPlan::on_tau_grid(tau, t0, n as f64 * tau, dt, setup.seed_c, setup.n_paths_c);
    let times = plan.record_times.clone();
    let continuous = SdeSource::new(&model, start.flatten(), plan)?.antithetic(setup.antithetic);
    weak_error_between(tau, &times, &discrete, &continuous, &setup.test_functions, setup.n_paths_d, setup.n_paths_c)
}

/// Weak-error rows and fitted slope for one test function across τ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakErrorReport {
    pub experiment: String,
    pub function: String,
    pub params: serde_json::Value,
    pub rows: Vec<WeakErrorRow>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Standard error of the fitted slope.
    pub stderr: Option<f64>,
    /// τ values dropped because their stderr exceeded the gate.
    pub excluded_taus: Vec<f64>,
    pub flagged: bool,
}

/// Anything that can produce weak-error rows for a given τ.
pub trait ErrorSource {
    fn measure(&self, tau: f64) -> Result<Vec<WeakErrorRow>>;
}

impl<F: Fn(f64) -> Result<Vec<WeakErrorRow>>> ErrorSource for F {
    fn measure(&self, tau: f64) -> Result<Vec<WeakErrorRow>> {
        self(tau)
    }
}

/// Default stderr gate: points whose stderr exceeds this fraction of their
/// error are excluded from the fit.
pub const STDERR_GATE: f64 = 0.25;

/// Fits a slope per test function from already measured rows.
pub fn fit_reports(experiment: &str, rows: Vec<WeakErrorRow>, gate: f64) -> Vec<WeakErrorReport> {
    let mut names: Vec<String> = Vec::new();
    for r in &rows {
        if !names.contains(&r.function) {
            names.push(r.function.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<WeakErrorRow> = rows.iter().filter(|r| r.function == name).cloned().collect();
            let (kept, dropped): (Vec<&WeakErrorRow>, Vec<&WeakErrorRow>) =
                mine.iter().partition(|r| r.max_error > 0.0 && r.stderr <= gate * r.max_error);
            let taus: Vec<f64> = kept.iter().map(|r| r.tau).collect();
            let errs: Vec<f64> = kept.iter().map(|r| r.max_error).collect();
            let fit = if kept.len() >= 2 { loglog_slope(&taus, &errs).ok() } else { None };
            WeakErrorReport {
                experiment: experiment.to_string(),
                function: name,
                params: serde_json::Value::Null,
                rows: mine.clone(),
                slope: fit.map(|f| f.slope),
                intercept: fit.map(|f| f.intercept),
                stderr: fit.map(|f| f.slope_stderr),
                excluded_taus: dropped.iter().map(|r| r.tau).collect(),
                flagged: !dropped.is_empty(),
            }
        })
        .collect()
}

/// Measures every τ (at least three) and fits one slope per test function.
pub fn slope_sweep(experiment: &str, source: &dyn ErrorSource, tau_list: &[f64], gate: f64) -> Result<Vec<WeakErrorReport>> {
    if tau_list.len() < 3 {
        return Err(Error::TooFewPoints { need: 3, got: tau_list.len() });
    }
    let mut rows = Vec::new();
    for &tau in tau_list {
        rows.extend(source.measure(tau)?);
    }
    Ok(fit_reports(experiment, rows, gate))
}

/// One-step moment comparison at a fixed state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentReport {
    pub tau: f64,
    pub n_samples: usize,
    /// Closed-form `E[Δ]` of one discrete step.
    pub first_closed_form: Vec<f64>,
    /// Plain Monte-Carlo `E[Δ]` of one discrete step.
    pub first_discrete_plain: Vec<f64>,
    pub first_discrete_plain_se: Vec<f64>,
    /// Control-variate `E[Δ]` of one discrete step.
    pub first_discrete: Vec<f64>,
    pub first_discrete_se: Vec<f64>,
    /// Martingale-corrected `E[Δ]` over one SDE interval of length τ.
    pub first_sde: Vec<f64>,
    pub first_sde_se: Vec<f64>,
    pub first_diff: Vec<f64>,
    pub first_diff_se: Vec<f64>,
    /// `τ·G_W G_Wᵀ` of the order-0 diffusion, shared by both sides.
    pub leading: Matrix,
    /// `E[ΔΔᵀ] − leading` for each side.
    pub second_discrete: Matrix,
    pub second_discrete_se: Matrix,
    pub second_sde: Matrix,
    pub second_sde_se: Matrix,
    pub second_diff: Matrix,
    pub second_diff_se: Matrix,
}

impl MomentReport {
    pub fn max_first_diff(&self) -> f64 {
        self.first_diff.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_second_diff(&self) -> f64 {
        self.second_diff.norm_inf()
    }
}

/// Configuration of the one-step moment oracle.
#[derive(Clone, Debug)]
pub struct MomentSetup {
    pub meta: ModelMeta,
    pub hyper: Hyper,
    /// Discrete state; for Adam `step ≥ 1` so the SDE starts at `step·τ > 0`.
    pub state: OptState,
    pub n_samples: usize,
    pub seed: u64,
    /// SDE substeps per τ; `None` means `4/τ` (substep τ²/4).
    pub substeps: Option<usize>,
}

/// Closed-form conditional mean of one discrete step.
pub fn discrete_mean_increment<L: LossModel + ?Sized>(
    optimizer: Optimizer,
    regime: Regime,
    hyper: &Hyper,
    problem: &L,
    state: &OptState,
) -> Vec<f64> {
    let tau = hyper.tau;
    let g = problem.grad_f(&state.theta);
    let sd = problem.sigma_d(&state.theta);
    let s2 = hyper.sigma * hyper.sigma;
    let (noise_sq, w2) = match regime {
        Regime::Balistic => (s2, tau),
        Regime::BatchEquivalent => (s2 / tau, tau * tau),
    };
    let c = hyper.phi_threshold;
    let d = g.len();
    let u_mean = |lam: f64, i: usize| -lam * tau * state.u[i] + lam * w2 * (g[i] * g[i] + noise_sq * sd[i]);
    match optimizer {
        Optimizer::Rmsprop => {
            let mut out: Vec<f64> =
                (0..d).map(|i| -tau * g[i] / (phi(state.u[i], c).sqrt() + hyper.epsilon)).collect();
            out.extend((0..d).map(|i| u_mean(hyper.lambda0, i)));
            out
        }
        Optimizer::Adam => {
            let m = state.m.as_ref().expect("Adam state carries m");
            let k = state.step;
            let big = big_gamma_bar(k, hyper);
            let eps_k = hyper.epsilon * gamma_bar(hyper.lambda2, k, tau).sqrt();
            let dm: Vec<f64> = (0..d).map(|i| hyper.lambda1 * tau * (g[i] - m[i])).collect();
            let mut out: Vec<f64> =
                (0..d).map(|i| -tau * big * (m[i] + dm[i]) / (phi(state.u[i], c).sqrt() + eps_k)).collect();
            out.extend(dm);
            out.extend((0..d).map(|i| u_mean(hyper.lambda2, i)));
            out
        }
    }
}

/// Sums of products for regression control variates.
#[derive(Clone, Debug)]
struct CvSums {
    n: f64,
    c: Vec<f64>,
    cc: Vec<f64>,
    y: Vec<f64>,
    yy: Vec<f64>,
    yc: Vec<f64>,
}

impl CvSums {
    fn new(p: usize, q: usize) -> Self {
        Self { n: 0.0, c: vec![0.0; p], cc: vec![0.0; p * p], y: vec![0.0; q], yy: vec![0.0; q], yc: vec![0.0; q * p] }
    }

    fn push(&mut self, c: &[f64], y: &[f64]) {
        let p = c.len();
        self.n += 1.0;
        for a in 0..p {
            self.c[a] += c[a];
            for b in 0..p {
                self.cc[a * p + b] += c[a] * c[b];
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            self.y[i] += yi;
            self.yy[i] += yi * yi;
            for a in 0..p {
                self.yc[i * p + a] += yi * c[a];
            }
        }
    }

    fn merge(&mut self, o: &CvSums) {
        self.n += o.n;
        for (a, b) in [(&mut self.c, &o.c), (&mut self.cc, &o.cc), (&mut self.y, &o.y), (&mut self.yy, &o.yy), (&mut self.yc, &o.yc)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Plain means and standard errors.
    fn plain(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mean: Vec<f64> = self.y.iter().map(|s| s / n).collect();
        let se = self.yy.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0) / (n - 1.0)).sqrt()).collect();
        (mean, se)
    }

    /// Control-variate estimate `ȳ − β·c̄` with `β` from least squares on
    /// controls whose true mean is zero.
    fn controlled(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let p = self.c.len();
        let q = self.y.len();
        let cbar: Vec<f64> = self.c.iter().map(|s| s / n).collect();
        let ccov = DMatrix::from_fn(p, p, |a, b| self.cc[a * p + b] / n - cbar[a] * cbar[b]);
        let chol = match ccov.clone().cholesky() {
            Some(c) => c,
            None => return self.plain(),
        };
        let mut mean = vec![0.0; q];
        let mut se = vec![0.0; q];
        for i in 0..q {
            let ybar = self.y[i] / n;
            let cyc = DVector::from_fn(p, |a, _| self.yc[i * p + a] / n - ybar * cbar[a]);
            let beta = chol.solve(&cyc);
            let var_y = self.yy[i] / n - ybar * ybar;
            let explained = beta.dot(&cyc);
            mean[i] = ybar - beta.iter().zip(&cbar).map(|(b, c)| b * c).sum::<f64>();
            se[i] = ((var_y - explained).max(0.0) / (n - 1.0)).sqrt();
        }
        (mean, se)
    }
}

fn quadratic_controls(xi: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(xi);
    for i in 0..xi.len() {
        for j in i..xi.len() {
            out.push(xi[i] * xi[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
}

/// Monte-Carlo comparison of one discrete step with one SDE interval of
/// length τ, under Gaussian-surrogate noise.
pub fn one_step_moment_check<L: LossModel + ?Sized>(setup: &MomentSetup, problem: &L) -> Result<MomentReport> {
    let MomentSetup { meta, hyper, ref state, n_samples, seed, substeps } = *setup;
    let tau = hyper.tau;
    if state.u.iter().any(|&u| u <= hyper.phi_threshold) {
        return Err(Error::Validation("moment check needs u above the clamp threshold".into()));
    }
    if n_samples < 2 {
        return Err(Error::Validation("need at least 2 samples".into()));
    }
    let d = problem.dim();
    let dynamics = DiscreteDynamics::new(meta.optimizer, meta.regime, hyper, problem, NoiseMode::GaussianSurrogate)?;
    let t0 = state.step as f64 * tau;
    let model = ContinuousModel::new(meta, hyper, problem, t0)?;
    let n = model.state_dim();
    let x0 = state.flatten();
    let sub = substeps.unwrap_or_else(|| (4.0 / tau).round() as usize).max(1);
    let h = tau / sub as f64;
    let sq_h = h.sqrt();
    let s_root = problem.sigma_sqrt(&state.theta)?;
    let p = d + d * (d + 1) / 2;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();

    // Order-0 diffusion at the start, shared by both sides.
    let order1 = ContinuousModel::new(ModelMeta { order: Order::One, ..meta }, hyper, problem, t0)?;
    let g0 = order1.diffusion_w(t0, &x0);
    let leading = g0.matmul(&g0.transpose()).scaled(tau);

    struct Acc {
        disc: CvSums,
        sde: CvSums,
        second_d: Vec<Welford>,
        second_c: Vec<Welford>,
    }
    let n_blocks = n_samples.div_ceil(crate::simulate::BLOCK);
    let blocks: Vec<Acc> = (0..n_blocks)
        .into_par_iter()
        .map(|b| -> Result<Acc> {
            let mut acc = Acc {
                disc: CvSums::new(p, n),
                sde: CvSums::new(0, n),
                second_d: vec![Welford::default(); pairs.len()],
                second_c: vec![Welford::default(); pairs.len()],
            };
            let mut xi = vec![0.0; d];
            let mut s_hat = vec![0.0; d];
            let mut controls = Vec::with_capacity(p);
            let mut delta = vec![0.0; n];
            let mut x = vec![0.0; n];
            let mut drift = vec![0.0; n];
            let mut noise = vec![0.0; n];
            let mut dw = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut drift_sum = vec![0.0; n];
            for i in b * crate::simulate::BLOCK..((b + 1) * crate::simulate::BLOCK).min(n_samples) {
                let idx = i as u64;
                let mut rng = RngStream::new(seed, namespace::DISCRETE, idx);
                rng.fill_normal(&mut xi);
                s_root.mul_vec_into(&xi, &mut s_hat);
                let mut s = state.clone();
                dynamics.step_with_noise(&mut s, &s_hat)?;
                let after = s.flatten();
                for k in 0..n {
                    delta[k] = after[k] - x0[k];
                }
                quadratic_controls(&xi, &mut controls);
                acc.disc.push(&controls, &delta);
                for (w, &(a, c)) in acc.second_d.iter_mut().zip(&pairs) {
                    w.push(delta[a] * delta[c] - leading[(a, c)]);
                }

                let mut rw = RngStream::new(seed, namespace::SDE_W, idx);
                let mut rb = RngStream::new(seed, namespace::SDE_B, idx);
                x.copy_from_slice(&x0);
                drift_sum.iter_mut().for_each(|v| *v = 0.0);
                for step in 0..sub {
                    let t = t0 + step as f64 * h;
                    model.drift(t, &x, &mut drift);
                    rw.fill_normal(&mut dw);
                    rb.fill_normal(&mut db);
                    dw.iter_mut().for_each(|v| *v *= sq_h);
                    db.iter_mut().for_each(|v| *v *= sq_h);
                    model.apply_noise(t, &x, &dw, &db, &mut noise);
                    for k in 0..n {
                        drift_sum[k] += drift[k] * h;
                        x[k] += drift[k] * h + noise[k];
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteState { step: sub });
                }
                acc.sde.push(&[], &drift_sum);
                for (w, &(a, c)) in acc.second_c.iter_mut().zip(&pairs) {
                    w.push((x[a] - x0[a]) * (x[c] - x0[c]) - leading[(a, c)]);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut total = Acc {
        disc: CvSums::new(p, n),
        sde: CvSums::new(0, n),
        second_d: vec![Welford::default(); pairs.len()],
        second_c: vec![Welford::default(); pairs.len()],
    };
    for a in &blocks {
        total.disc.merge(&a.disc);
        total.sde.merge(&a.sde);
        for (t, w) in total.second_d.iter_mut().zip(&a.second_d) {
            t.merge(w);
        }
        for (t, w) in total.second_c.iter_mut().zip(&a.second_c) {
            t.merge(w);
        }
    }
    let (plain, plain_se) = total.disc.plain();
    let (first_discrete, first_discrete_se) = total.disc.controlled();
    let (first_sde, first_sde_se) = total.sde.plain();
    let first_diff: Vec<f64> = first_discrete.iter().zip(&first_sde).map(|(a, b)| a - b).collect();
    let first_diff_se: Vec<f64> = first_discrete_se.iter().zip(&first_sde_se).map(|(a, b)| a.hypot(*b)).collect();

    let sym = |f: &dyn Fn(usize) -> f64| {
        let mut m = Matrix::zeros(n, n);
        for (k, &(a, c)) in pairs.iter().enumerate() {
            m[(a, c)] = f(k);
            m[(c, a)] = f(k);
        }
        m
    };
    let second_discrete = sym(&|k| total.second_d[k].mean);
    let second_discrete_se = sym(&|k| total.second_d[k].stderr());
    let second_sde = sym(&|k| total.second_c[k].mean);
    let second_sde_se = sym(&|k| total.second_c[k].stderr());
    let second_diff = sym(&|k| total.second_d[k].mean - total.second_c[k].mean);
    let second_diff_se = sym(&|k| total.second_d[k].stderr().hypot(total.second_c[k].stderr()));

    Ok(MomentReport {
        tau,
        n_samples,
        first_closed_form: discrete_mean_increment(meta.optimizer, meta.regime, &hyper, problem, state),
        first_discrete_plain: plain,
        first_discrete_plain_se: plain_se,
        first_discrete,
        first_discrete_se,
        first_sde,
        first_sde_se,
        first_diff,
        first_diff_se,
        leading,
        second_discrete,
        second_discrete_se,
        second_sde,
        second_sde_se,
        second_diff,
        second_diff_se,
    })
}

/// Law of the toy-model innovations ξ (mean 0, variance 1, no skew).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiLaw {
    Normal,
    /// Uniform on `(−√3, √3)`.
    Uniform,
}

impl std::str::FromStr for XiLaw {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normal" => Ok(XiLaw::Normal),
            "uniform" => Ok(XiLaw::Uniform),
            _ => Err(format!("unknown xi law `{s}` (expected normal or uniform)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyNoiseConfig {
    pub xi_law: XiLaw,
    pub n: usize,
}

impl ToyNoiseConfig {
    /// `κ² = Var(ξ²)`.
    pub fn kappa_sq(&self) -> f64 {
        match self.xi_law {
            XiLaw::Normal => 2.0,
            XiLaw::Uniform => 0.8,
        }
    }

    fn draw(&self, rng: &mut RngStream) -> f64 {
        match self.xi_law {
            XiLaw::Normal => rng.normal(),
            XiLaw::Uniform => rng.uniform(-(3f64.sqrt()), 3f64.sqrt()),
        }
    }
}

/// Increments `b_j = √τ ξ_j`, `ω_j = (√τ/κ)(ξ_j² − 1)` with `τ = 1/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPath {
    pub b: Vec<f64>,
    pub omega: Vec<f64>,
    /// The innovations themselves.
    pub xi: Vec<f64>,
}

impl ToyPath {
    fn interpolate(incr: &[f64], t: f64) -> f64 {
        let n = incr.len();
        let s = (t.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let whole = (s.floor() as usize).min(n);
        let partial: f64 = incr[..whole].iter().sum();
        if whole < n {
            partial + (s - whole as f64) * incr[whole]
        } else {
            partial
        }
    }

    /// Piecewise-linear `B^N_t`.
    pub fn b_at(&self, t: f64) -> f64 {
        Self::interpolate(&self.b, t)
    }

    /// Piecewise-linear `W^N_t`.
    pub fn w_at(&self, t: f64) -> f64 {
        Self::interpolate(&self.omega, t)
    }
}

pub fn toy_build(config: &ToyNoiseConfig, rng: &mut RngStream) -> ToyPath {
    assert!(config.n >= 1);
    let tau = 1.0 / config.n as f64;
    let st = tau.sqrt();
    let kappa = config.kappa_sq().sqrt();
    let xi: Vec<f64> = (0..config.n).map(|_| config.draw(rng)).collect();
    let b = xi.iter().map(|x| st * x).collect();
    let omega = xi.iter().map(|x| st / kappa * (x * x - 1.0)).collect();
    ToyPath { b, omega, xi }
}

/// Summary statistics of many toy paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub xi_law: XiLaw,
    pub n: usize,
    pub n_replicas: usize,
    pub kappa_sq: f64,
    /// Pooled correlation of `(b_j, ω_j)`.
    pub corr_b_omega: f64,
    pub ks_b1: f64,
    pub ks_w1: f64,
    /// 1% critical value of the KS statistic at `n_replicas`.
    pub ks_critical: f64,
    /// Per-replica `Σ_j b_j ω_j`.
    pub covariation_mean: f64,
    pub covariation_stderr: f64,
    pub qv_times: Vec<f64>,
    pub qv_b_mean: Vec<f64>,
    pub qv_b_stderr: Vec<f64>,
    pub qv_w_mean: Vec<f64>,
    pub qv_w_stderr: Vec<f64>,
    /// Empirical `Var(ξ²)` averaged over replicas.
    pub xi_sq_var: f64,
    pub xi_sq_var_stderr: f64,
}

/// Kolmogorov–Smirnov distance of a sample to N(0, 1).
pub fn ks_normal(sample: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = normal.cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// 1% critical value of the one-sample KS statistic (Stephens' form).
pub fn ks_critical_1pct(n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    1.628 / (sn + 0.12 + 0.11 / sn)
}

pub fn toy_tests(config: &ToyNoiseConfig, n_replicas: usize, seed: u64) -> ToyReport {
    let qv_times = vec![0.25, 0.5, 0.75, 1.0];
    struct Rep {
        b1: f64,
        w1: f64,
        cov: f64,
        qv_b: [f64; 4],
        qv_w: [f64; 4],
        sums: [f64; 5],
        xi_var: f64,
    }
    let reps: Vec<Rep> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(seed, namespace::TOY, r as u64);
            let path = toy_build(config, &mut rng);
            let n = config.n;
            let mut qv_b = [0.0; 4];
            let mut qv_w = [0.0; 4];
            let (mut qb, mut qw) = (0.0, 0.0);
            let mut next = 0;
            let mut sums = [0.0; 5];
            let mut xs = Welford::default();
            for j in 0..n {
                let (b, w) = (path.b[j], path.omega[j]);
                qb += b * b;
                qw += w * w;
                sums[0] += b;
                sums[1] += w;
                sums[2] += b * b;
                sums[3] += w * w;
                sums[4] += b * w;
                xs.push(path.xi[j] * path.xi[j]);
                while next < 4 && j + 1 == (qv_times[next] * n as f64).round() as usize {
                    qv_b[next] = qb;
                    qv_w[next] = qw;
                    next += 1;
                }
            }
            Rep {
                b1: path.b_at(1.0),
                w1: path.w_at(1.0),
                cov: sums[4],
                qv_b,
                qv_w,
                sums,
                xi_var: xs.variance(),
            }
        })
        .collect();

    let total = (config.n * n_replicas) as f64;
    let mut sums = [0.0; 5];
    let mut cov = Welford::default();
    let mut xi_var = Welford::default();
    let mut qvb = [Welford::default(); 4];
    let mut qvw = [Welford::default(); 4];
    for r in &reps {
        for k in 0..5 {
            sums[k] += r.sums[k];
        }
        cov.push(r.cov);
        xi_var.push(r.xi_var);
        for k in 0..4 {
            qvb[k].push(r.qv_b[k]);
            qvw[k].push(r.qv_w[k]);
        }
    }
    let (mb, mw) = (sums[0] / total, sums[1] / total);
    let vb = sums[2] / total - mb * mb;
    let vw = sums[3] / total - mw * mw;
    let cbw = sums[4] / total - mb * mw;
    let b1: Vec<f64> = reps.iter().map(|r| r.b1).collect();
    let w1: Vec<f64> = reps.iter().map(|r| r.w1).collect();
    ToyReport {
        xi_law: config.xi_law,
        n: config.n,
        n_replicas,
        kappa_sq: config.kappa_sq(),
        corr_b_omega: cbw / (vb * vw).sqrt(),
        ks_b1: ks_normal(&b1),
        ks_w1: ks_normal(&w1),
        ks_critical: ks_critical_1pct(n_replicas),
        covariation_mean: cov.mean,
        covariation_stderr: cov.stderr(),
        qv_times,
        qv_b_mean: qvb.iter().map(|w| w.mean).collect(),
        qv_b_stderr: qvb.iter().map(|w| w.stderr()).collect(),
        qv_w_mean: qvw.iter().map(|w| w.mean).collect(),
        qv_w_stderr: qvw.iter().map(|w| w.stderr()).collect(),
        xi_sq_var: xi_var.mean,
        xi_sq_var_stderr: xi_var.stderr(),
    }
}
