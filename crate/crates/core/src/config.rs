//! Experiment configuration: a sectioned `key = value` text format with
//! defaults, validation and the η ↔ τ regime mapping.
//!
//! ```text
//! [problem]
//! d = 6
//! [optimizer]
//! optimizer = rmsprop
//! regime = balistic
//! order = 2
//! [simulation]
//! tau_list = 0.125, 0.0625, 0.03125
//! horizon_t = 5
//! [analysis]
//! test_functions = f1, f2
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{standard_test_functions, TestFunction, WeakErrorSetup, STDERR_GATE};
use crate::continuous::{ModelMeta, Order};
use crate::discrete::{Hyper, NoiseMode, OptState, Optimizer, Regime};
use crate::error::{Error, Result};
use crate::numerics::{namespace, RngStream};
use crate::problem::{generate_problem, FourthMomentMode, QuadraticGaussianProblem};
use crate::simulate::default_path_count;

/// Start of the Adam comparison window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TStart {
    /// A fixed time, rounded to the τ grid.
    Time(f64),
    /// The second iterate, `2τ`, for every τ.
    SecondIterate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Dataset,
    GaussianSurrogate,
}

/// A fully defaulted, validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d: usize,
    pub dataset_size: usize,
    pub problem_seed: u64,
    pub dataset_seed: u64,
    pub fourth_moment: FourthMomentMode,
    /// Debug mode: every gradient averages the whole dataset (no noise).
    pub full_pass: bool,

    pub optimizer: Optimizer,
    pub regime: Regime,
    pub order: Order,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub sigma: f64,
    /// Clamp threshold `c`; `None` means `c = τ`.
    pub phi_threshold: Option<f64>,

    /// Strictly decreasing; a single entry for one-τ commands.
    pub tau_list: Vec<f64>,
    pub horizon_t: f64,
    pub t_start: Option<TStart>,
    /// Integrator step; `None` means τ².
    pub dt: Option<f64>,
    pub noise_mode: NoiseKind,
    pub batch_b0: usize,
    pub initial_seed: u64,
    /// Initial value of every `u` coordinate.
    pub u0: f64,
    pub discrete_seed: u64,
    pub continuous_seed: u64,
    pub paths_d: Option<usize>,
    pub paths_c: Option<usize>,
    /// Antithetic noise pairs on the continuous side.
    pub antithetic: bool,

    pub test_functions: Vec<String>,
    pub stderr_gate: f64,
}

/// `η = τ` (balistic) or `η = √τ` (batch-equivalent).
pub fn derive_eta(regime: Regime, tau: f64) -> f64 {
    match regime {
        Regime::Balistic => tau,
        Regime::BatchEquivalent => tau.sqrt(),
    }
}

const SECTIONS: [(&str, &[&str]); 4] = [
    ("problem", &["d", "dataset_size", "problem_seed", "dataset_seed", "fourth_moment", "full_pass"]),
    (
        "optimizer",
        &["optimizer", "regime", "order", "lambda0", "lambda1", "lambda2", "epsilon", "sigma", "phi_threshold"],
    ),
    (
        "simulation",
        &[
            "tau",
            "tau_list",
            "horizon_t",
            "t_start",
            "dt",
            "noise_mode",
            "batch_b0",
            "initial_seed",
            "u0",
            "discrete_seed",
            "continuous_seed",
            "paths_d",
            "paths_c",
            "antithetic",
        ],
    ),
    ("analysis", &["test_functions", "stderr_gate"]),
];

struct Raw {
    values: BTreeMap<&'static str, (usize, String)>,
}

impl Raw {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Parse { line, message: format!("{key}: {e}") }),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<T>().map_err(|e| Error::Parse { line, message: format!("{key}: {e}") }))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

struct Wrapped<T>(T);

macro_rules! kebab_from_str {
    ($t:ty, $($s:literal => $v:expr),+) => {
        impl FromStr for Wrapped<$t> {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(Wrapped($v)),)+
                    _ => Err(format!("unknown value `{s}`")),
                }
            }
        }
    };
}

kebab_from_str!(FourthMomentMode, "gaussian-analytic" => FourthMomentMode::GaussianAnalytic, "empirical" => FourthMomentMode::Empirical);
kebab_from_str!(NoiseKind, "dataset" => NoiseKind::Dataset, "gaussian-surrogate" => NoiseKind::GaussianSurrogate);

impl FromStr for TStart {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "second-iterate" {
            Ok(TStart::SecondIterate)
        } else {
            s.parse::<f64>().map(TStart::Time).map_err(|e| e.to_string())
        }
    }
}

/// Parses, defaults and validates a configuration text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with_overrides(text, &[])
}

/// As [`parse_config`], with `key = value` overrides applied before
/// defaults are filled (so e.g. an `order` override also moves the λ
/// defaults). Overrides are reported at line 0.
pub fn parse_config_with_overrides(text: &str, overrides: &[(&str, String)]) -> Result<ExperimentConfig> {
    let mut raw = Raw { values: BTreeMap::new() };
    let mut section: Option<&'static [&'static str]> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .map(|(_, keys)| *keys)
                    .ok_or_else(|| Error::Parse { line: line_no, message: format!("unknown section [{name}]") })?,
            );
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: line_no, message: "expected `key = value`".into() })?;
        let key = key.trim();
        let keys = section.ok_or_else(|| Error::Parse { line: line_no, message: format!("key `{key}` outside any section") })?;
        let key: &'static str = keys
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| Error::Parse { line: line_no, message: format!("unknown key `{key}`") })?;
        if raw.values.insert(key, (line_no, value.trim().to_string())).is_some() {
            return Err(Error::Parse { line: line_no, message: format!("duplicate key `{key}`") });
        }
    }
    for (key, value) in overrides {
        let key: &'static str = SECTIONS
            .iter()
            .flat_map(|(_, keys)| keys.iter())
            .find(|k| *k == key)
            .ok_or_else(|| Error::Parse { line: 0, message: format!("unknown key `{key}`") })?;
        // A single τ replaces a list and vice versa.
        match key {
            "tau" => {
                raw.values.remove("tau_list");
            }
            "tau_list" => {
                raw.values.remove("tau");
            }
            _ => {}
        }
        raw.values.insert(key, (0, value.trim().to_string()));
    }
    if raw.values.contains_key("tau") && raw.values.contains_key("tau_list") {
        let line = raw.values["tau_list"].0;
        return Err(Error::Parse { line, message: "give either `tau` or `tau_list`, not both".into() });
    }

    let optimizer: Optimizer = raw.take("optimizer")?.unwrap_or(Optimizer::Rmsprop);
    let order: Order = raw.take("order")?.unwrap_or(Order::One);
    // Order-1 runs default to the practical λ values; order-2 models are
    // written at λ = 1.
    let (l0, l1, l2) = match order {
        Order::One => (0.5, 1.0, 0.5),
        Order::Two => (1.0, 1.0, 1.0),
    };
    let tau_list = match raw.take::<f64>("tau")? {
        Some(t) => vec![t],
        None => raw.take_list("tau_list")?.unwrap_or_else(|| vec![0.125]),
    };
    let cfg = ExperimentConfig {
        d: raw.take("d")?.unwrap_or(6),
        dataset_size: raw.take("dataset_size")?.unwrap_or(128_000),
        problem_seed: raw.take("problem_seed")?.unwrap_or(3),
        dataset_seed: raw.take("dataset_seed")?.unwrap_or(2),
        fourth_moment: raw.take::<Wrapped<FourthMomentMode>>("fourth_moment")?.map_or(FourthMomentMode::GaussianAnalytic, |w| w.0),
        full_pass: raw.take("full_pass")?.unwrap_or(false),
        optimizer,
        regime: raw.take("regime")?.unwrap_or(Regime::Balistic),
        order,
        lambda0: raw.take("lambda0")?.unwrap_or(l0),
        lambda1: raw.take("lambda1")?.unwrap_or(l1),
        lambda2: raw.take("lambda2")?.unwrap_or(l2),
        epsilon: raw.take("epsilon")?.unwrap_or(1e-6),
        sigma: raw.take("sigma")?.unwrap_or(1.0),
        phi_threshold: raw.take("phi_threshold")?,
        tau_list,
        horizon_t: raw.take("horizon_t")?.unwrap_or(10.0),
        t_start: raw.take("t_start")?,
        dt: raw.take("dt")?,
        noise_mode: raw.take::<Wrapped<NoiseKind>>("noise_mode")?.map_or(NoiseKind::Dataset, |w| w.0),
        batch_b0: raw.take("batch_b0")?.unwrap_or(1),
        initial_seed: raw.take("initial_seed")?.unwrap_or(7),
        u0: raw.take("u0")?.unwrap_or(1.0),
        discrete_seed: raw.take("discrete_seed")?.unwrap_or(100),
        continuous_seed: raw.take("continuous_seed")?.unwrap_or(200),
        paths_d: raw.take("paths_d")?,
        paths_c: raw.take("paths_c")?,
        antithetic: raw.take("antithetic")?.unwrap_or(false),
        test_functions: raw.take_list::<String>("test_functions")?.unwrap_or_default(),
        stderr_gate: raw.take("stderr_gate")?.unwrap_or(STDERR_GATE),
    };
    let mut cfg = cfg;
    if cfg.test_functions.is_empty() {
        cfg.test_functions = standard_test_functions(cfg.optimizer, cfg.d).iter().map(|f| f.name().to_string()).collect();
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// The defaults for an optimizer/regime/order triple, validated.
    pub fn defaults(optimizer: Optimizer, regime: Regime, order: Order) -> Result<Self> {
        parse_config(&format!("[optimizer]\noptimizer = {optimizer}\nregime = {regime}\norder = {order}\n"))
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta { optimizer: self.optimizer, regime: self.regime, order: self.order }
    }

    pub fn hyper(&self, tau: f64) -> Hyper {
        Hyper {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            epsilon: self.epsilon,
            sigma: self.sigma,
            tau,
            horizon_t: self.horizon_t,
            phi_threshold: self.phi_threshold.unwrap_or(tau),
        }
    }

    /// Comparison start time at `tau` (0 for RMSprop).
    pub fn t_start_at(&self, tau: f64) -> f64 {
        match (self.optimizer, self.t_start) {
            (Optimizer::Rmsprop, _) | (_, None) => 0.0,
            (_, Some(TStart::Time(t))) => t,
            (_, Some(TStart::SecondIterate)) => 2.0 * tau,
        }
    }

    pub fn noise(&self) -> NoiseMode {
        match self.noise_mode {
            NoiseKind::Dataset => NoiseMode::Dataset { batch: self.batch_b0 },
            NoiseKind::GaussianSurrogate => NoiseMode::GaussianSurrogate,
        }
    }

    pub fn paths_d_at(&self, tau: f64) -> usize {
        self.paths_d.unwrap_or_else(|| default_path_count(self.order, self.horizon_t, tau))
    }

    pub fn paths_c_at(&self, tau: f64) -> usize {
        self.paths_c.unwrap_or_else(|| default_path_count(self.order, self.horizon_t, tau))
    }

    pub fn build_problem(&self) -> Result<QuadraticGaussianProblem> {
        generate_problem(self.d, self.problem_seed, self.dataset_seed, self.dataset_size).with_fourth_moment(self.fourth_moment)
            .map(|p| p.with_full_pass(self.full_pass))
    }

    /// Seeded `θ₀ ~ N(0, I)`, `m₀ = 0`, `u₀ = u0·1`.
    pub fn initial_state(&self) -> OptState {
        let mut rng = RngStream::new(self.initial_seed, namespace::INITIAL, 0);
        let theta: Vec<f64> = (0..self.d).map(|_| rng.normal()).collect();
        let u = vec![self.u0; self.d];
        match self.optimizer {
            Optimizer::Rmsprop => OptState::rmsprop(theta, u),
            Optimizer::Adam => OptState::adam(theta, vec![0.0; self.d], u),
        }
    }

    pub fn test_functions(&self) -> Vec<TestFunction> {
        let all = standard_test_functions(self.optimizer, self.d);
        self.test_functions.iter().filter_map(|n| all.iter().find(|f| f.name() == n).cloned()).collect()
    }

    /// Weak-error setup at one τ of the list.
    pub fn weak_error_setup<'a>(&self, problem: &'a QuadraticGaussianProblem, tau: f64) -> WeakErrorSetup<'a, QuadraticGaussianProblem> {
        WeakErrorSetup {
            meta: self.meta(),
            hyper: self.hyper(tau),
            problem,
            noise: self.noise(),
            x0: self.initial_state(),
            t_start: self.t_start_at(tau),
            dt: self.dt,
            n_paths_d: self.paths_d_at(tau),
            n_paths_c: self.paths_c_at(tau),
            seed_d: self.discrete_seed,
            seed_c: self.continuous_seed,
            antithetic: self.antithetic,
            test_functions: self.test_functions(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.d == 0 || self.dataset_size == 0 || self.batch_b0 == 0 {
            return fail("d, dataset_size and batch_b0 must be at least 1".into());
        }
        if self.noise_mode == NoiseKind::Dataset && self.batch_b0 > self.dataset_size {
            return fail("batch_b0 exceeds dataset_size".into());
        }
        if self.tau_list.is_empty() {
            return fail("tau_list is empty".into());
        }
        if self.tau_list.windows(2).any(|w| w[1] >= w[0]) {
            return fail("tau_list must be strictly decreasing".into());
        }
        for &tau in &self.tau_list {
            self.hyper(tau).validate()?;
        }
        if !(self.u0 > 0.0 && self.u0.is_finite()) {
            return fail("u0 must be positive".into());
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return fail("dt must be positive".into());
            }
        }
        if self.paths_d == Some(0) || self.paths_c == Some(0) {
            return fail("path counts must be at least 1".into());
        }
        if !(self.stderr_gate > 0.0) {
            return fail("stderr_gate must be positive".into());
        }
        let known = standard_test_functions(self.optimizer, self.d);
        for name in &self.test_functions {
            if !known.iter().any(|f| f.name() == name) {
                return fail(format!("unknown test function `{name}` for {}", self.optimizer));
            }
        }
        if self.optimizer == Optimizer::Adam {
            match self.t_start {
                None => return fail("t_start is required for Adam (a time or `second-iterate`)".into()),
                Some(TStart::Time(t)) => {
                    let tau_max = self.tau_list[0];
                    if !(t >= 2.0 * tau_max - 1e-12) || !t.is_finite() {
                        return fail(format!("t_start must be at least 2*tau = {}", 2.0 * tau_max));
                    }
                    if t >= self.horizon_t {
                        return fail("t_start must lie before the horizon".into());
                    }
                }
                Some(TStart::SecondIterate) => {}
            }
        }
        Ok(())
    }

    /// Text form accepted by [`parse_config`]; every field is written out.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let fm = match self.fourth_moment {
            FourthMomentMode::GaussianAnalytic => "gaussian-analytic",
            FourthMomentMode::Empirical => "empirical",
        };
        let _ = writeln!(s, "[problem]");
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "dataset_size = {}", self.dataset_size);
        let _ = writeln!(s, "problem_seed = {}", self.problem_seed);
        let _ = writeln!(s, "dataset_seed = {}", self.dataset_seed);
        let _ = writeln!(s, "fourth_moment = {fm}");
        let _ = writeln!(s, "full_pass = {}", self.full_pass);
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "regime = {}", self.regime);
        let _ = writeln!(s, "order = {}", self.order);
        let _ = writeln!(s, "lambda0 = {:?}", self.lambda0);
        let _ = writeln!(s, "lambda1 = {:?}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {:?}", self.lambda2);
        let _ = writeln!(s, "epsilon = {:?}", self.epsilon);
        let _ = writeln!(s, "sigma = {:?}", self.sigma);
        if let Some(c) = self.phi_threshold {
            let _ = writeln!(s, "phi_threshold = {c:?}");
        }
        let _ = writeln!(s, "\n[simulation]");
        let _ = writeln!(s, "tau_list = {}", list(&self.tau_list));
        let _ = writeln!(s, "horizon_t = {:?}", self.horizon_t);
        match self.t_start {
            Some(TStart::Time(t)) => {
                let _ = writeln!(s, "t_start = {t:?}");
            }
            Some(TStart::SecondIterate) => {
                let _ = writeln!(s, "t_start = second-iterate");
            }
            None => {}
        }
        if let Some(dt) = self.dt {
            let _ = writeln!(s, "dt = {dt:?}");
        }
        let nm = match self.noise_mode {
            NoiseKind::Dataset => "dataset",
            NoiseKind::GaussianSurrogate => "gaussian-surrogate",
        };
        let _ = writeln!(s, "noise_mode = {nm}");
        let _ = writeln!(s, "batch_b0 = {}", self.batch_b0);
        let _ = writeln!(s, "initial_seed = {}", self.initial_seed);
        let _ = writeln!(s, "u0 = {:?}", self.u0);
        let _ = writeln!(s, "discrete_seed = {}", self.discrete_seed);
        let _ = writeln!(s, "continuous_seed = {}", self.continuous_seed);
        if let Some(p) = self.paths_d {
            let _ = writeln!(s, "paths_d = {p}");
        }
        if let Some(p) = self.paths_c {
            let _ = writeln!(s, "paths_c = {p}");
        }
        let _ = writeln!(s, "antithetic = {}", self.antithetic);
        let _ = writeln!(s, "\n[analysis]");
        let _ = writeln!(s, "test_functions = {}", self.test_functions.join(", "));
        let _ = writeln!(s, "stderr_gate = {:?}", self.stderr_gate);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_optimizer_section_gets_defaults() {
        let c = parse_config("[optimizer]\n").unwrap();
        assert_eq!(c.epsilon, 1e-6);
        assert_eq!(c.sigma, 1.0);
        assert_eq!(c.horizon_t, 10.0);
        assert_eq!(c.d, 6);
        assert_eq!(c.lambda0, 0.5);
        let a = parse_config("[optimizer]\noptimizer = adam\n[simulation]\nt_start = 0.25\n").unwrap();
        assert_eq!((a.lambda1, a.lambda2), (1.0, 0.5));
        assert_eq!(a.test_functions, vec!["f1", "f2", "f3"]);
    }

    #[test]
    fn large_tau_is_rejected() {
        let e = parse_config("[optimizer]\nlambda0 = 1\n[simulation]\ntau = 0.9\n").unwrap_err();
        assert!(matches!(e, Error::Validation(ref m) if m.contains("1/(2*lambda0)")), "{e}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(parse_config("[problem]\n\nbogus = 1\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_config("[nowhere]\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("d = 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_config("[problem]\nd = x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_config("[problem]\nd 3\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn adam_requires_t_start() {
        assert!(matches!(parse_config("[optimizer]\noptimizer = adam\n"), Err(Error::Validation(_))));
        let s = "[optimizer]\noptimizer = adam\n[simulation]\ntau = 0.125\nt_start = 0.125\n";
        assert!(matches!(parse_config(s), Err(Error::Validation(_))));
        let c = parse_config("[optimizer]\noptimizer = adam\n[simulation]\nt_start = second-iterate # keyword\n").unwrap();
        assert_eq!(c.t_start_at(0.0625), 0.125);
    }

    #[test]
    fn tau_list_must_decrease() {
        assert!(parse_config("[simulation]\ntau_list = 0.1, 0.2\n").is_err());
        let c = parse_config("[simulation]\ntau_list = 0.125, 0.0625, 0.03125\n").unwrap();
        assert_eq!(c.tau_list.len(), 3);
    }

    #[test]
    fn overrides_replace_file_values() {
        let text = "[optimizer]\norder = 1\n[simulation]\ntau_list = 0.1, 0.05\n";
        let c = parse_config_with_overrides(text, &[("order", "2".into()), ("tau", "0.125".into())]).unwrap();
        assert_eq!(c.order, Order::Two);
        assert_eq!(c.lambda0, 1.0);
        assert_eq!(c.tau_list, vec![0.125]);
        assert!(matches!(parse_config_with_overrides("", &[("nope", "1".into())]), Err(Error::Parse { line: 0, .. })));
    }

    #[test]
    fn eta_mapping() {
        assert_eq!(derive_eta(Regime::Balistic, 0.125), 0.125);
        assert_eq!(derive_eta(Regime::BatchEquivalent, 0.25), 0.5);
        assert_eq!(derive_eta(Regime::BatchEquivalent, 2f64.powi(-6)), 0.125);
    }

    #[test]
    fn serialize_round_trip() {
        let text = "[optimizer]\noptimizer = adam\nregime = batch-equivalent\norder = 2\nphi_threshold = 0.001\n\
                    [problem]\nfull_pass = true\n\
                    [simulation]\ntau_list = 0.1, 0.05\nt_start = 0.3\ndt = 0.001\npaths_c = 10\n\
                    noise_mode = gaussian-surrogate\nantithetic = true\n[analysis]\ntest_functions = f3\n";
        let c = parse_config(text).unwrap();
        assert_eq!(parse_config(&c.serialize()).unwrap(), c);
    }
}
