//! Euler–Maruyama integration and parallel ensemble averages.
//!
//! Ensembles are cut into fixed blocks of paths. Each block is reduced
//! sequentially, and blocks are merged in index order, so results do not
//! depend on how many threads run them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::TestFunction;
use crate::continuous::{Order, SdeModel};
use crate::discrete::{steps_between, DiscreteDynamics, OptState};
use crate::error::{Error, Result};
use crate::numerics::{namespace, RngStream};
use crate::problem::LossModel;

/// Paths per reduction block.
pub const BLOCK: usize = 256;
/// Blocks evaluated in parallel before merging, bounding memory.
const BLOCKS_PER_WAVE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationPlan {
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub record_times: Vec<f64>,
    pub seed: u64,
    pub n_paths: usize,
}

impl IntegrationPlan {
    /// Records at `kτ` for every grid point in `[t_start, t_end]`.
    pub fn on_tau_grid(tau: f64, t_start: f64, t_end: f64, dt: f64, seed: u64, n_paths: usize) -> Self {
        let k0 = (t_start / tau).round() as usize;
        let n = steps_between(0.0, t_end, tau);
        let record_times = (k0..=n).map(|k| k as f64 * tau).collect();
        Self { dt, t_start, t_end, record_times, seed, n_paths }
    }

    pub fn validate(&self, model_t_start: f64) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Validation(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_start < model_t_start - 1e-12 {
            return Err(Error::Validation(format!(
                "plan starts at {} before the model's start {}",
                self.t_start, model_t_start
            )));
        }
        if self.t_end < self.t_start {
            return Err(Error::Validation("t_end precedes t_start".into()));
        }
        if let Some(bad) = self.record_times.iter().find(|&&t| t < self.t_start - 1e-12 || t > self.t_end + 1e-12) {
            return Err(Error::Validation(format!("record time {bad} outside [{}, {}]", self.t_start, self.t_end)));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        steps_between(self.t_start, self.t_end, self.dt)
    }

    /// Grid indices nearest to each record time.
    pub fn record_steps(&self) -> Vec<usize> {
        self.record_times.iter().map(|t| ((t - self.t_start) / self.dt).round().max(0.0) as usize).collect()
    }
}

/// The W and B streams of one path.
pub fn path_streams(seed: u64, path: u64) -> (RngStream, RngStream) {
    (RngStream::new(seed, namespace::SDE_W, path), RngStream::new(seed, namespace::SDE_B, path))
}

/// Euler–Maruyama from `x0` at `t_start` over `n_steps` steps of size `dt`,
/// calling `record(j, x)` when the step index equals `record_steps[j]`.
/// `record_steps` must be non-decreasing.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t_start: f64,
    dt: f64,
    n_steps: usize,
    record_steps: &[usize],
    rng_w: &mut RngStream,
    rng_b: &mut RngStream,
    record: impl FnMut(usize, &[f64]),
) -> Result<()> {
    integrate_signed(model, x0, t_start, dt, n_steps, record_steps, rng_w, rng_b, 1.0, record)
}

#[allow(clippy::too_many_arguments)]
fn integrate_signed<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    t_start: f64,
    dt: f64,
    n_steps: usize,
    record_steps: &[usize],
    rng_w: &mut RngStream,
    rng_b: &mut RngStream,
    sign: f64,
    mut record: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let n = model.state_dim();
    let r = model.noise_dim();
    let (has_w, has_b) = (model.has_w(), model.has_b());
    let sq = sign * dt.sqrt();
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; n];
    let mut noise = vec![0.0; n];
    let mut dw = vec![0.0; r];
    let mut db = vec![0.0; r];
    let mut next = 0;
    let mut emit = |step: usize, x: &[f64], next: &mut usize| {
        while *next < record_steps.len() && record_steps[*next] == step {
            record(*next, x);
            *next += 1;
        }
    };
    emit(0, &x, &mut next);
    for step in 0..n_steps {
        let t = t_start + step as f64 * dt;
        model.drift(t, &x, &mut drift);
        if has_w {
            rng_w.fill_normal(&mut dw);
            dw.iter_mut().for_each(|v| *v *= sq);
        }
        if has_b {
            rng_b.fill_normal(&mut db);
            db.iter_mut().for_each(|v| *v *= sq);
        }
        if has_w || has_b {
            model.apply_noise(t, &x, &dw, &db, &mut noise);
            for i in 0..n {
                x[i] += drift[i] * dt + noise[i];
            }
        } else {
            for i in 0..n {
                x[i] += drift[i] * dt;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        emit(step + 1, &x, &mut next);
    }
    Ok(())
}

/// Integrates one path and returns the recorded states.
pub fn integrate_path<M: SdeModel + ?Sized>(
    model: &M,
    x0: &[f64],
    plan: &IntegrationPlan,
    rng_w: &mut RngStream,
    rng_b: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    plan.validate(model.t_start())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let steps = plan.record_steps();
    let mut out = vec![Vec::new(); steps.len()];
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by_key(|&j| steps[j]);
    let sorted: Vec<usize> = order.iter().map(|&j| steps[j]).collect();
    integrate_with(model, x0, plan.t_start, plan.dt, plan.n_steps(), &sorted, rng_w, rng_b, |j, x| {
        out[order[j]] = x.to_vec();
    })?;
    Ok(out)
}

/// Something that produces independent sample paths observed at a fixed
/// list of record points.
pub trait PathSource: Sync {
    fn n_records(&self) -> usize;

    /// Runs path `index` and reports every record in order.
    fn run_path(&self, index: u64, record: &mut dyn FnMut(usize, &[f64])) -> Result<()>;

    /// Paths averaged into one statistical sample (2 for antithetic pairs).
    fn group_size(&self) -> usize {
        1
    }

    /// Every path is identical, so one suffices.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Paths of a continuous model.
pub struct SdeSource<'m, M: SdeModel + ?Sized> {
    model: &'m M,
    x0: Vec<f64>,
    plan: IntegrationPlan,
    steps: Vec<usize>,
    antithetic: bool,
}

impl<'m, M: SdeModel + ?Sized> SdeSource<'m, M> {
    pub fn new(model: &'m M, x0: Vec<f64>, plan: IntegrationPlan) -> Result<Self> {
        plan.validate(model.t_start())?;
        let steps = plan.record_steps();
        if steps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Validation("record times must be non-decreasing".into()));
        }
        Ok(Self { model, x0, plan, steps, antithetic: false })
    }

    /// Pairs path `2i` with the path driven by the negated noise of `2i+1`.
    /// Each path keeps the exact law; only the pair average is a sample.
    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn plan(&self) -> &IntegrationPlan {
        &self.plan
    }
}

impl<M: SdeModel + ?Sized> PathSource for SdeSource<'_, M> {
    fn n_records(&self) -> usize {
        self.steps.len()
    }

    fn run_path(&self, index: u64, record: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        let (stream, sign) = if self.antithetic { (index / 2, if index.is_multiple_of(2) { 1.0 } else { -1.0 }) } else { (index, 1.0) };
        let (mut w, mut b) = path_streams(self.plan.seed, stream);
        let plan = &self.plan;
        integrate_signed(self.model, &self.x0, plan.t_start, plan.dt, plan.n_steps(), &self.steps, &mut w, &mut b, sign, record)
    }

    fn group_size(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }

    fn is_deterministic(&self) -> bool {
        !self.model.has_w() && !self.model.has_b()
    }
}

/// Paths of the discrete iteration, recorded at every step from `x0.step`
/// to `n_end`.
pub struct DiscreteSource<'a, L: LossModel + ?Sized> {
    dynamics: DiscreteDynamics<'a, L>,
    x0: OptState,
    n_end: usize,
    seed: u64,
}

impl<'a, L: LossModel + ?Sized> DiscreteSource<'a, L> {
    pub fn new(dynamics: DiscreteDynamics<'a, L>, x0: OptState, n_end: usize, seed: u64) -> Self {
        Self { dynamics, x0, n_end, seed }
    }
}

impl<L: LossModel + ?Sized> PathSource for DiscreteSource<'_, L> {
    fn n_records(&self) -> usize {
        self.n_end.saturating_sub(self.x0.step) + 1
    }

    fn run_path(&self, index: u64, record: &mut dyn FnMut(usize, &[f64])) -> Result<()> {
        let mut rng = RngStream::new(self.seed, namespace::DISCRETE, index);
        let mut state = self.x0.clone();
        let mut flat = state.flatten();
        let mut noise = vec![0.0; state.theta.len()];
        record(0, &flat);
        for j in 1..self.n_records() {
            self.dynamics.draw_noise(&state.theta, &mut rng, &mut noise)?;
            self.dynamics.step_with_noise(&mut state, &noise)?;
            state.flatten_into(&mut flat);
            record(j, &flat);
        }
        Ok(())
    }
}

/// Running mean and sum of squared deviations (Welford), mergeable (Chan).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Per-function, per-record ensemble means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    pub names: Vec<String>,
    /// `mean[f][j]`.
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_paths: usize,
}

/// Generic ordered reduction of per-path statistics. `run` fills one
/// accumulator vector for a path.
pub fn reduce_paths<F>(n_paths: usize, slots: usize, run: F) -> Result<Vec<Welford>>
where
    F: Fn(u64, &mut [Welford]) -> Result<()> + Sync,
{
    let n_blocks = n_paths.div_ceil(BLOCK);
    let mut total = vec![Welford::default(); slots];
    let blocks: Vec<usize> = (0..n_blocks).collect();
    for wave in blocks.chunks(BLOCKS_PER_WAVE) {
        let partial: Vec<Vec<Welford>> = wave
            .par_iter()
            .map(|&b| {
                let mut acc = vec![Welford::default(); slots];
                for path in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                    run(path as u64, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        for acc in &partial {
            for (t, a) in total.iter_mut().zip(acc) {
                t.merge(a);
            }
        }
    }
    Ok(total)
}

/// Sample means and standard errors of each test function at each record.
/// With grouped sources `n_paths` is rounded up to a whole number of groups.
pub fn ensemble_mean(source: &dyn PathSource, fns: &[TestFunction], n_paths: usize) -> Result<EnsembleEstimate> {
    if n_paths < 2 {
        return Err(Error::Validation("an ensemble needs at least 2 paths".into()));
    }
    let nr = source.n_records();
    let nf = fns.len();
    let names = fns.iter().map(|f| f.name().to_string()).collect();
    if source.is_deterministic() {
        let mut mean = vec![vec![0.0; nr]; nf];
        source.run_path(0, &mut |j, x| {
            for (f, g) in fns.iter().enumerate() {
                mean[f][j] = g.evaluate(x);
            }
        })?;
        return Ok(EnsembleEstimate { names, mean, stderr: vec![vec![0.0; nr]; nf], n_paths });
    }
    let group = source.group_size().max(1);
    let units = n_paths.div_ceil(group).max(2);
    let total = reduce_paths(units, nf * nr, |unit, acc| {
        if group == 1 {
            return source.run_path(unit, &mut |j, x| {
                for (f, g) in fns.iter().enumerate() {
                    acc[f * nr + j].push(g.evaluate(x));
                }
            });
        }
        let mut sums = vec![0.0; nf * nr];
        for k in 0..group as u64 {
            source.run_path(unit * group as u64 + k, &mut |j, x| {
                for (f, g) in fns.iter().enumerate() {
                    sums[f * nr + j] += g.evaluate(x);
                }
            })?;
        }
        for (a, s) in acc.iter_mut().zip(&sums) {
            a.push(s / group as f64);
        }
        Ok(())
    })?;
    Ok(EnsembleEstimate {
        names,
        mean: (0..nf).map(|f| total[f * nr..(f + 1) * nr].iter().map(|w| w.mean).collect()).collect(),
        stderr: (0..nf).map(|f| total[f * nr..(f + 1) * nr].iter().map(|w| w.stderr()).collect()).collect(),
        n_paths: units * group,
    })
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool
/// when `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool").install(f),
        None => f(),
    }
}

/// Default path count: `min(max(100·√T·τ^{-2p}, floor), 10⁷)` with `p = 1`,
/// floor `10⁴` for order 1 and `p = 2`, floor `10⁵` for order 2.
pub fn default_path_count(order: Order, horizon_t: f64, tau: f64) -> usize {
    let (power, floor) = match order {
        Order::One => (2, 1e4),
        Order::Two => (4, 1e5),
    };
    let n = 100.0 * horizon_t.sqrt() * tau.powi(-power);
    n.max(floor).min(1e7).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    /// `dX = a X dt + s dW` in one dimension, with an optional second driver.
    struct Linear {
        a: f64,
        c: f64,
        s: f64,
        sb: f64,
    }

    impl SdeModel for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
            out[0] = self.a * x[0] + self.c;
        }
        fn diffusion_w(&self, _t: f64, _x: &[f64]) -> Matrix {
            Matrix::from_diag(&[self.s])
        }
        fn diffusion_b(&self, _t: f64, _x: &[f64]) -> Matrix {
            Matrix::from_diag(&[self.sb])
        }
        fn has_w(&self) -> bool {
            self.s != 0.0
        }
        fn has_b(&self) -> bool {
            self.sb != 0.0
        }
    }

    fn run_single(model: &Linear, x0: f64, t_end: f64, dt: f64) -> f64 {
        let plan = IntegrationPlan { dt, t_start: 0.0, t_end, record_times: vec![t_end], seed: 1, n_paths: 1 };
        let (mut w, mut b) = path_streams(1, 0);
        integrate_path(model, &[x0], &plan, &mut w, &mut b).unwrap()[0][0]
    }

    #[test]
    fn zero_fields_give_constant_path() {
        let m = Linear { a: 0.0, c: 0.0, s: 0.0, sb: 0.0 };
        assert_eq!(run_single(&m, 2.5, 1.0, 0.01), 2.5);
    }

    #[test]
    fn constant_drift_is_exact() {
        let m = Linear { a: 0.0, c: 1.0, s: 0.0, sb: 0.0 };
        assert!((run_single(&m, 0.3, 1.0, 0.01) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn ou_decay() {
        let m = Linear { a: -1.0, c: 0.0, s: 0.0, sb: 0.0 };
        assert!((run_single(&m, 1.0, 1.0, 1e-4) - (-1.0f64).exp()).abs() < 0.01);
    }

    #[test]
    fn plan_rejects_bad_records() {
        let plan = IntegrationPlan { dt: 0.1, t_start: 0.0, t_end: 1.0, record_times: vec![1.5], seed: 0, n_paths: 1 };
        assert!(plan.validate(0.0).is_err());
        let plan = IntegrationPlan { record_times: vec![0.5], t_start: 0.2, ..plan };
        assert!(plan.validate(0.3).is_err());
        assert!(plan.validate(0.0).is_ok());
    }

    #[test]
    fn deterministic_and_constant_ensembles() {
        let m = Linear { a: -1.0, c: 0.5, s: 0.0, sb: 0.0 };
        let plan = IntegrationPlan { dt: 0.01, t_start: 0.0, t_end: 1.0, record_times: vec![0.0, 0.5, 1.0], seed: 3, n_paths: 10 };
        let src = SdeSource::new(&m, vec![1.0], plan).unwrap();
        let fns = [TestFunction::mean_square("x2", 0, 1), TestFunction::constant("one", 1.0)];
        let est = ensemble_mean(&src, &fns, 10).unwrap();
        assert_eq!(est.stderr[0], vec![0.0; 3]);
        assert_eq!(est.mean[1], vec![1.0; 3]);
        assert_eq!(est.stderr[1], vec![0.0; 3]);
        let single = run_single(&m, 1.0, 1.0, 0.01);
        assert!((est.mean[0][2] - single * single).abs() < 1e-12);
    }

    #[test]
    fn brownian_second_moment() {
        let m = Linear { a: 0.0, c: 0.0, s: 1.0, sb: 0.0 };
        let plan = IntegrationPlan { dt: 0.01, t_start: 0.0, t_end: 1.0, record_times: vec![1.0], seed: 4, n_paths: 10_000 };
        let src = SdeSource::new(&m, vec![0.0], plan).unwrap();
        let est = ensemble_mean(&src, &[TestFunction::mean_square("x2", 0, 1)], 10_000).unwrap();
        assert!((est.mean[0][0] - 1.0).abs() < 3.0 * est.stderr[0][0], "{:?}", est);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = Linear { a: -0.5, c: 0.1, s: 0.7, sb: 0.3 };
        let plan = IntegrationPlan { dt: 0.01, t_start: 0.0, t_end: 1.0, record_times: vec![0.5, 1.0], seed: 5, n_paths: 3000 };
        let src = SdeSource::new(&m, vec![1.0], plan).unwrap();
        let fns = [TestFunction::mean_square("x2", 0, 1)];
        let a = with_threads(Some(1), || ensemble_mean(&src, &fns, 3000).unwrap());
        let b = with_threads(Some(3), || ensemble_mean(&src, &fns, 3000).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn welford_merge_matches_direct() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut all = Welford::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Welford::default(), Welford::default());
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-14);
        assert!((a.m2 - all.m2).abs() < 1e-12);
    }

    #[test]
    fn path_count_schedule() {
        assert_eq!(default_path_count(Order::One, 1.0, 0.5), 10_000);
        assert_eq!(default_path_count(Order::One, 4.0, 0.01), 2_000_000);
        assert_eq!(default_path_count(Order::Two, 1.0, 0.5), 100_000);
        assert_eq!(default_path_count(Order::Two, 1.0, 0.01), 10_000_000);
    }
}
