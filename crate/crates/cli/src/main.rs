use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sme_core::analysis::{
    fit_reports, one_step_moment_check, slope_sweep, toy_tests, weak_error, ErrorSource, MomentSetup, ToyNoiseConfig,
    WeakErrorRow, XiLaw,
};
use sme_core::config::{parse_config_with_overrides, ExperimentConfig};
use sme_core::continuous::ContinuousModel;
use sme_core::discrete::DiscreteDynamics;
use sme_core::numerics::loglog_slope;
use sme_core::problem::{generate_dataset, DatasetFile, LossModel};
use sme_core::simulate::{ensemble_mean, with_threads, DiscreteSource, EnsembleEstimate, IntegrationPlan, SdeSource};
use sme_core::Error;

#[derive(Parser)]
#[command(name = "sme-lab", version, about = "Adaptive-optimizer SDE laboratory: simulations, weak-error sweeps and noise diagnostics")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SME_LAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ensemble means of the test functions along one discrete or continuous run.
    Simulate(SimulateArgs),
    /// Weak error between the discrete iteration and its continuous model at one τ.
    WeakError(ReportArgs),
    /// Weak error over a list of τ with fitted log-log slopes.
    Sweep(SweepArgs),
    /// Invariance statistics of the two-noise toy model.
    Toy(ToyArgs),
    /// One-step moment comparison at the configured initial state.
    Moments(MomentArgs),
    /// Writes a seeded dataset file.
    GenProblem(GenArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated, strictly decreasing.
    #[arg(long)]
    tau_list: Option<String>,
    #[arg(long)]
    horizon: Option<f64>,
    /// A time or `second-iterate`.
    #[arg(long)]
    t_start: Option<String>,
    /// Paths on both sides.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    paths_d: Option<usize>,
    #[arg(long)]
    paths_c: Option<usize>,
    /// Seed of both path ensembles.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_mode: Option<String>,
    #[arg(long)]
    antithetic: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum, Default, PartialEq)]
enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum, Default, PartialEq)]
enum Source {
    #[default]
    Discrete,
    Continuous,
}

#[derive(Args)]
struct OutArgs {
    /// Output file; a `<out>.manifest.json` is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value_t)]
    source: Source,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace the live comparison by synthetic errors `0.3·τ^P`.
    #[arg(long)]
    synthetic_order: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value = "normal")]
    xi: XiLaw,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 10_000)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MomentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 128_000)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteState { .. } | Error::EigenvalueBelowTolerance { .. } | Error::SingularCovariance { .. } => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut o: Vec<(&str, String)> = Vec::new();
    let mut put = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k, v));
        }
    };
    put("optimizer", args.optimizer.clone());
    put("regime", args.regime.clone());
    put("order", args.order.clone());
    put("tau", args.tau.map(|v| format!("{v:?}")));
    put("tau_list", args.tau_list.clone());
    put("horizon_t", args.horizon.map(|v| format!("{v:?}")));
    put("t_start", args.t_start.clone());
    put("paths_d", args.paths_d.or(args.paths).map(|v| v.to_string()));
    put("paths_c", args.paths_c.or(args.paths).map(|v| v.to_string()));
    put("discrete_seed", args.seed.map(|v| v.to_string()));
    put("continuous_seed", args.seed.map(|v| v.to_string()));
    put("noise_mode", args.noise_mode.clone());
    put("antithetic", args.antithetic.map(|v| v.to_string()));
    Ok(parse_config_with_overrides(&text, &o)?)
}

/// Records stages and writes outputs plus their manifest.
struct Run {
    command: &'static str,
    hash: String,
    inputs: Value,
    started: u64,
    stages: Vec<(String, f64)>,
    clock: Instant,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Run {
    /// `inputs` must fully determine the outputs; it is hashed.
    fn new(command: &'static str, inputs: Value) -> Self {
        let canonical = serde_json::to_vec(&json!({ "command": command, "inputs": inputs })).expect("json");
        let hash = hex(&Sha256::digest(&canonical));
        Run { command, hash, inputs, started: unix_now(), stages: Vec::new(), clock: Instant::now() }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.stages.push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    fn csv_header(&self) -> String {
        format!("# manifest={}\n", self.hash)
    }

    fn emit(&self, out: Option<&Path>, body: &str) -> CliResult<()> {
        match out {
            None => {
                print!("{body}");
                Ok(())
            }
            Some(path) => {
                std::fs::write(path, body).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
                let mut manifest_path = path.as_os_str().to_owned();
                manifest_path.push(".manifest.json");
                let manifest = json!({
                    "command": self.command,
                    "manifest": self.hash,
                    "inputs": self.inputs,
                    "git_describe": git_describe(),
                    "started_unix": self.started,
                    "finished_unix": unix_now(),
                    "outputs": [path.display().to_string()],
                    "stages": self.stages.iter().map(|(n, s)| json!({"name": n, "wall_clock_s": s})).collect::<Vec<_>>(),
                    "total_wall_clock_s": self.clock.elapsed().as_secs_f64(),
                });
                std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("json") + "\n")
                    .map_err(|e| usage(format!("cannot write manifest: {e}")))
            }
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn config_inputs(cfg: &ExperimentConfig) -> Value {
    json!({ "config": cfg.serialize() })
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let tau = cfg.tau_list[0];
    let source = match a.source {
        Source::Discrete => "discrete",
        Source::Continuous => "continuous",
    };
    let mut run = Run::new("simulate", json!({ "config": cfg.serialize(), "source": source, "format": a.out.format == Format::Json }));
    let problem = run.stage("build-problem", || cfg.build_problem())?;
    let setup = cfg.weak_error_setup(&problem, tau);
    let start = setup.initial_state()?;
    let k0 = setup.start_step();
    let hyper = setup.hyper;
    let n_end = hyper.n_steps();
    let fns = cfg.test_functions();
    let times: Vec<f64> = (k0..=n_end).map(|k| k as f64 * tau).collect();
    let est: EnsembleEstimate = run.stage("ensemble", || -> sme_core::Result<EnsembleEstimate> {
        match a.source {
            Source::Discrete => {
                let dynamics = DiscreteDynamics::new(cfg.optimizer, cfg.regime, hyper, &problem, cfg.noise())?;
                let src = DiscreteSource::new(dynamics, start.clone(), n_end, cfg.discrete_seed);
                ensemble_mean(&src, &fns, cfg.paths_d_at(tau))
            }
            Source::Continuous => {
                let t0 = k0 as f64 * tau;
                let model = ContinuousModel::new(cfg.meta(), hyper, &problem, t0)?;
                let plan = IntegrationPlan::on_tau_grid(tau, t0, n_end as f64 * tau, cfg.dt.unwrap_or(tau * tau), cfg.continuous_seed, cfg.paths_c_at(tau));
                let src = SdeSource::new(&model, start.flatten(), plan)?.antithetic(cfg.antithetic);
                ensemble_mean(&src, &fns, cfg.paths_c_at(tau))
            }
        }
    })?;
    let body = match a.out.format {
        Format::Csv => {
            let mut s = run.csv_header();
            let cols: Vec<String> = est.names.iter().map(|n| format!("E[{n}],se_{n}")).collect();
            s.push_str(&format!("t,{}\n", cols.join(",")));
            for (j, t) in times.iter().enumerate() {
                let vals: Vec<String> = (0..est.names.len()).map(|f| format!("{},{}", fmt(est.mean[f][j]), fmt(est.stderr[f][j]))).collect();
                s.push_str(&format!("{},{}\n", fmt(*t), vals.join(",")));
            }
            s
        }
        Format::Json => {
            let rows: Vec<Value> = times
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut o = serde_json::Map::new();
                    o.insert("t".into(), json!(t));
                    for (f, n) in est.names.iter().enumerate() {
                        o.insert(format!("E[{n}]"), json!(est.mean[f][j]));
                        o.insert(format!("se_{n}"), json!(est.stderr[f][j]));
                    }
                    Value::Object(o)
                })
                .collect();
            serde_json::to_string_pretty(&rows).expect("json") + "\n"
        }
    };
    run.emit(a.out.out.as_deref(), &body)
}

#[derive(Serialize)]
struct Report<'a> {
    experiment: &'a str,
    manifest: &'a str,
    params: Value,
    rows: &'a [WeakErrorRow],
    /// Fitted slope per test function.
    slope: serde_json::Map<String, Value>,
    stderr: serde_json::Map<String, Value>,
}

fn render_rows(run: &Run, experiment: &str, params: Value, rows: &[WeakErrorRow], format: Format, gate: f64) -> String {
    match format {
        Format::Csv => {
            let mut s = run.csv_header();
            s.push_str("function,tau,max_error,stderr,n_paths_d,n_paths_c\n");
            for r in rows {
                s.push_str(&format!("{},{},{},{},{},{}\n", r.function, fmt(r.tau), fmt(r.max_error), fmt(r.stderr), r.n_paths_d, r.n_paths_c));
            }
            s
        }
        Format::Json => {
            let fits = fit_reports(experiment, rows.to_vec(), gate);
            let slope = fits.iter().map(|f| (f.function.clone(), json!(f.slope))).collect();
            let stderr = fits.iter().map(|f| (f.function.clone(), json!(f.stderr))).collect();
            let report = Report { experiment, manifest: &run.hash, params, rows, slope, stderr };
            serde_json::to_string_pretty(&report).expect("json") + "\n"
        }
    }
}

fn cmd_weak_error(a: ReportArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let tau = cfg.tau_list[0];
    let mut run = Run::new("weak-error", json!({ "config": cfg.serialize(), "json": a.out.format == Format::Json }));
    let problem = run.stage("build-problem", || cfg.build_problem())?;
    let rows = run.stage("weak-error", || weak_error(&cfg.weak_error_setup(&problem, tau)))?;
    let body = render_rows(&run, "weak-error", config_inputs(&cfg), &rows, a.out.format, cfg.stderr_gate);
    run.emit(a.out.out.as_deref(), &body)
}

struct Synthetic {
    power: f64,
    functions: Vec<String>,
}

impl ErrorSource for Synthetic {
    fn measure(&self, tau: f64) -> sme_core::Result<Vec<WeakErrorRow>> {
        Ok(self
            .functions
            .iter()
            .map(|f| WeakErrorRow {
                function: f.clone(),
                tau,
                times: vec![],
                errors: vec![],
                max_error: 0.3 * tau.powf(self.power),
                stderr: 0.0,
                stderr_d: 0.0,
                stderr_c: 0.0,
                argmax_time: 0.0,
                n_paths_d: 0,
                n_paths_c: 0,
            })
            .collect())
    }
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let mut run = Run::new(
        "sweep",
        json!({ "config": cfg.serialize(), "synthetic_order": a.synthetic_order, "json": a.out.format == Format::Json }),
    );
    let reports = match a.synthetic_order {
        Some(power) => {
            let src = Synthetic { power, functions: cfg.test_functions.clone() };
            slope_sweep("synthetic", &src, &cfg.tau_list, cfg.stderr_gate)?
        }
        None => {
            let problem = run.stage("build-problem", || cfg.build_problem())?;
            let live = |tau: f64| weak_error(&cfg.weak_error_setup(&problem, tau));
            run.stage("sweep", || slope_sweep("sweep", &live, &cfg.tau_list, cfg.stderr_gate))?
        }
    };
    let rows: Vec<WeakErrorRow> = reports.iter().flat_map(|r| r.rows.clone()).collect();
    let experiment = if a.synthetic_order.is_some() { "synthetic" } else { "sweep" };
    let body = render_rows(&run, experiment, config_inputs(&cfg), &rows, a.out.format, cfg.stderr_gate);
    run.emit(a.out.out.as_deref(), &body)?;
    for r in &reports {
        let slope = r.slope.map_or("nan".to_string(), |v| format!("{v:.3}"));
        let se = r.stderr.map_or("nan".to_string(), |v| format!("{v:.3}"));
        let flag = if r.flagged { " flagged" } else { "" };
        println!("slope={slope} stderr={se} function={}{flag}", r.function);
    }
    Ok(())
}

fn cmd_toy(a: ToyArgs) -> CliResult<()> {
    if a.n == 0 || a.replicas < 2 {
        return Err(usage("toy needs n >= 1 and replicas >= 2"));
    }
    let mut run = Run::new("toy", json!({ "xi": a.xi, "n": a.n, "replicas": a.replicas, "seed": a.seed }));
    let cfg = ToyNoiseConfig { xi_law: a.xi, n: a.n };
    let report = run.stage("toy", || toy_tests(&cfg, a.replicas, a.seed));
    let mut v = serde_json::to_value(&report).expect("json");
    v["manifest"] = json!(run.hash);
    run.emit(a.out.as_deref(), &(serde_json::to_string_pretty(&v).expect("json") + "\n"))
}

fn cmd_moments(a: MomentArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.noise_mode = sme_core::config::NoiseKind::GaussianSurrogate;
    let mut run = Run::new("moments", json!({ "config": cfg.serialize(), "samples": a.samples, "json": a.out.format == Format::Json }));
    let problem = run.stage("build-problem", || cfg.build_problem())?;
    let mut state = cfg.initial_state();
    // Keep u on the active branch of the clamp for every τ.
    let c_max = cfg.tau_list.iter().map(|&t| cfg.hyper(t).phi_threshold).fold(0.0, f64::max);
    if state.u.iter().any(|&u| u <= c_max) {
        return Err(usage(format!("u0 must exceed the clamp threshold {c_max}")));
    }
    let _ = problem.dim();
    let mut reports = Vec::new();
    for &tau in &cfg.tau_list {
        if cfg.optimizer == sme_core::discrete::Optimizer::Adam {
            state.step = (cfg.t_start_at(tau) / tau).round().max(1.0) as usize;
        }
        let setup = MomentSetup { meta: cfg.meta(), hyper: cfg.hyper(tau), state: state.clone(), n_samples: a.samples, seed: cfg.discrete_seed, substeps: None };
        reports.push(run.stage(&format!("tau={tau}"), || one_step_moment_check(&setup, &problem))?);
    }
    let taus: Vec<f64> = reports.iter().map(|r| r.tau).collect();
    let first: Vec<f64> = reports.iter().map(|r| r.max_first_diff()).collect();
    let second: Vec<f64> = reports.iter().map(|r| r.max_second_diff()).collect();
    let fit = |e: &[f64]| loglog_slope(&taus, e).ok().map(|f| f.slope);
    let (s1, s2) = (fit(&first), fit(&second));
    let body = match a.out.format {
        Format::Csv => {
            let mut s = run.csv_header();
            s.push_str("tau,max_first_diff,first_stderr,max_second_diff,second_stderr\n");
            for r in &reports {
                let fse = r.first_diff_se.iter().cloned().fold(0.0, f64::max);
                s.push_str(&format!("{},{},{},{},{}\n", fmt(r.tau), fmt(r.max_first_diff()), fmt(fse), fmt(r.max_second_diff()), fmt(r.second_diff_se.norm_inf())));
            }
            s
        }
        Format::Json => {
            let v = json!({ "experiment": "moments", "manifest": run.hash, "params": config_inputs(&cfg), "rows": reports, "first_slope": s1, "second_slope": s2 });
            serde_json::to_string_pretty(&v).expect("json") + "\n"
        }
    };
    run.emit(a.out.out.as_deref(), &body)?;
    let show = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.3}"));
    println!("first_slope={} second_slope={}", show(s1), show(s2));
    Ok(())
}

fn cmd_gen_problem(a: GenArgs) -> CliResult<()> {
    if a.d == 0 || a.size == 0 {
        return Err(usage("d and size must be at least 1"));
    }
    let file = DatasetFile { d: a.d, seed: a.seed, data: generate_dataset(a.d, a.size, a.seed) };
    file.save(&a.out)?;
    eprintln!("wrote {} samples of dimension {} to {}", a.size, a.d, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads;
    let result = with_threads(threads, move || match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::WeakError(a) => cmd_weak_error(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Toy(a) => cmd_toy(a),
        Command::Moments(a) => cmd_moments(a),
        Command::GenProblem(a) => cmd_gen_problem(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
