//! The `reset-ridge` command line.
//!
//! Exit codes: 0 on success, 1 when a check fails, 2 for usage or config errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_trajectory, snapshot_batch, NoiseModel};
use crate::error::{Error, Result};
use crate::experiments::{run_sweep, ExperimentConfig, Method, SweepOutput};
use crate::filters::{filter_curve, two_mode_mismatch, FilterSpec};
use crate::io::{fmt_f64, load_design, read_config, write_csv, write_json, GridSpec};
use crate::laws::ResetLaw;
use crate::moments::{
    lyapunov_residual, minimize_over_rate, poisson_conditional_risk, poisson_total_risk, renewal_covariance,
    renewal_snapshot_risk, ridge_risk, risk_landscape, snr_ratio, Estimator, LandscapeConfig, RiskReport,
};
use crate::parallel::{with_thread_cap, Execution};
use crate::spectral::{build_spectral_model, SpectralModel};
use crate::verify::{run_verify, VerifyOptions};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "reset-ridge", version, about = "Ridge regression as stochastic resetting: filters, moments, risks and experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Base seed; falls back to RESET_RIDGE_SEED, then the config, then 42.
    #[arg(long, global = true, env = "RESET_RIDGE_SEED")]
    pub seed: Option<u64>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More progress output on stderr.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Suppress the stdout summary.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate filter curves g(μ) for ridge, renewal and cutoff filters.
    FilterCurve,
    /// Run the identity and Monte Carlo check suite.
    Verify {
        /// Snapshots per Monte Carlo check (below 10000 misses only warn).
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Run a spiked or block prediction sweep.
    Experiment {
        /// Also write per-trial records.
        #[arg(long)]
        detail: bool,
        /// Also write a method / test MSE / gain / SE table.
        #[arg(long = "table-g7")]
        table_g7: bool,
    },
    /// Simulate a reset trajectory or equilibrium snapshots.
    Simulate,
    /// Exact stationary mean and covariance decomposition for a reset law.
    Moments {
        /// Also compare against this many equilibrium snapshots.
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Risk reports and Poisson-rate risk scans.
    Risk,
    /// Risk-minimizing Poisson reset rate.
    OptimalRate,
    /// Best reset-law class over a (μτ, ν) grid.
    Landscape,
    /// Effective-penalty mismatch between weak and strong modes.
    Mismatch,
}

struct Ctx {
    out: PathBuf,
    seed: Option<u64>,
    verbose: u8,
    quiet: bool,
}

impl Ctx {
    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) | Err(Error::Numerical(_)) => 1,
        Err(_) => 2,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let threads = cli.threads;
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    with_thread_cap(threads, move || dispatch(cli))
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    fs::create_dir_all(&cli.out)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", cli.out.display())))?;
    let ctx = Ctx { out: cli.out.clone(), seed: cli.seed, verbose: cli.verbose, quiet: cli.quiet };
    let config = cli.config.as_deref();
    match cli.command {
        Command::FilterCurve => cmd_filter_curve(&ctx, required(config)?),
        Command::Verify { mc_samples } => cmd_verify(&ctx, config, mc_samples),
        Command::Experiment { detail, table_g7 } => cmd_experiment(&ctx, required(config)?, detail, table_g7),
        Command::Simulate => cmd_simulate(&ctx, required(config)?),
        Command::Moments { mc_samples } => cmd_moments(&ctx, required(config)?, mc_samples),
        Command::Risk => cmd_risk(&ctx, required(config)?),
        Command::OptimalRate => cmd_optimal_rate(&ctx, required(config)?),
        Command::Landscape => cmd_landscape(&ctx, config),
        Command::Mismatch => cmd_mismatch(&ctx, config),
    }
}

fn required(config: Option<&Path>) -> Result<&Path> {
    config.ok_or_else(|| Error::Config("this subcommand needs --config <path>".into()))
}

fn f(x: f64) -> String {
    fmt_f64(x)
}

fn slug(label: &str) -> String {
    let mut s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterCurveConfig {
    filters: Vec<FilterSpec>,
    mu_grid: GridSpec,
}

fn cmd_filter_curve(ctx: &Ctx, config: &Path) -> Result<Outcome> {
    let cfg: FilterCurveConfig = read_config(config)?;
    if cfg.filters.is_empty() {
        return Err(Error::Config("`filters` must list at least one filter".into()));
    }
    let grid = cfg.mu_grid.values()?;
    let mut columns = Vec::new();
    let mut admissibility = Vec::new();
    for (k, spec) in cfg.filters.iter().enumerate() {
        let curve = filter_curve(spec, &grid)?;
        let rows: Vec<Vec<String>> = curve.iter().map(|&(m, g)| vec![f(m), f(g)]).collect();
        write_csv(ctx.path(&format!("filter_{k}_{}.csv", slug(&spec.label()))), &["mu", "g"], &rows)?;
        if let FilterSpec::Renewal { law } = spec {
            admissibility.push(law.admissibility_check(&grid)?);
        }
        columns.push(curve.into_iter().map(|(_, g)| g).collect::<Vec<_>>());
    }
    let labels: Vec<String> = cfg.filters.iter().map(FilterSpec::label).collect();
    let header: Vec<&str> = std::iter::once("mu").chain(labels.iter().map(String::as_str)).collect();
    let rows: Vec<Vec<String>> = grid
        .iter()
        .enumerate()
        .map(|(i, &m)| std::iter::once(f(m)).chain(columns.iter().map(|c| f(c[i]))).collect())
        .collect();
    write_csv(ctx.path("filter_curves.csv"), &header, &rows)?;
    if !admissibility.is_empty() {
        write_json(ctx.path("admissibility.json"), &admissibility)?;
    }
    ctx.say(format!("wrote {} filter curves over {} grid points to {}", labels.len(), grid.len(), ctx.out.display()));
    Ok(Outcome::Success)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    seed: Option<u64>,
    mc_samples: Option<usize>,
}

fn cmd_verify(ctx: &Ctx, config: Option<&Path>, mc_samples: Option<usize>) -> Result<Outcome> {
    let cfg: VerifyConfig = match config {
        Some(p) => read_config(p)?,
        None => VerifyConfig::default(),
    };
    let defaults = VerifyOptions::default();
    let opts = VerifyOptions {
        seed: ctx.seed_or(cfg.seed.unwrap_or(DEFAULT_SEED)),
        mc_samples: mc_samples.or(cfg.mc_samples).unwrap_or(defaults.mc_samples),
        exec: Execution::Parallel,
    };
    if opts.mc_samples < 2 {
        return Err(Error::Config("--mc-samples must be at least 2".into()));
    }
    let report = run_verify(&opts)?;
    write_json(ctx.path("verify.json"), &report)?;
    ctx.say(report.table().trim_end());
    Ok(if report.passed() { Outcome::Success } else { Outcome::CheckFailed })
}

const SWEEP_HEADER: [&str; 6] = ["sweep_value", "method", "mean_mse", "gain_pct", "se_gain_pct", "trials"];

fn sweep_rows(out: &SweepOutput) -> Vec<Vec<String>> {
    out.results
        .iter()
        .flat_map(|r| {
            r.methods.iter().map(move |m| {
                vec![f(r.sweep_value), m.method.to_string(), f(m.mean_mse), f(m.gain_pct), f(m.se_gain_pct), r.trials.to_string()]
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TableRow {
    experiment: String,
    sweep_value: f64,
    method: Method,
    test_mse: f64,
    gain_pct: f64,
    se_pct: Option<f64>,
}

fn table_rows(out: &SweepOutput) -> Vec<TableRow> {
    out.results
        .iter()
        .flat_map(|r| {
            r.methods.iter().map(move |m| TableRow {
                experiment: r.experiment.clone(),
                sweep_value: r.sweep_value,
                method: m.method,
                test_mse: m.mean_mse,
                gain_pct: m.gain_pct,
                se_pct: (m.method != Method::Ridge).then_some(m.se_gain_pct),
            })
        })
        .collect()
}

fn table_text(sweep_name: &str, rows: &[TableRow]) -> String {
    let mut s = format!("{:<10} {:>8}  {:<12} {:>9} {:>9} {:>8}\n", "experiment", sweep_name, "method", "test_mse", "gain", "se");
    for r in rows {
        let se = r.se_pct.map_or("-".to_string(), |v| format!("{v:.3}%"));
        s.push_str(&format!(
            "{:<10} {:>8}  {:<12} {:>9.3} {:>8.3}% {:>8}\n",
            r.experiment,
            r.sweep_value,
            r.method.to_string(),
            r.test_mse,
            r.gain_pct,
            se
        ));
    }
    s
}

fn cmd_experiment(ctx: &Ctx, config: &Path, detail: bool, table: bool) -> Result<Outcome> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(seed) = ctx.seed {
        cfg.set_base_seed(seed);
    }
    cfg.validate()?;
    ctx.progress(format!(
        "{} sweep: {} values x {} trials, seed {}",
        cfg.name(),
        cfg.sweep_values().len(),
        cfg.trials(),
        cfg.base_seed()
    ));
    let out = run_sweep(&cfg, Execution::Parallel)?;
    write_csv(ctx.path("sweep.csv"), &SWEEP_HEADER, &sweep_rows(&out))?;
    let rows = table_rows(&out);
    write_json(
        ctx.path("summary.json"),
        &serde_json::json!({
            "experiment": cfg.name(),
            "sweep_variable": cfg.sweep_name(),
            "base_seed": cfg.base_seed(),
            "config_hash": out.results.first().map(|r| r.config_hash.clone()),
            "config": cfg,
            "results": out.results,
        }),
    )?;
    if detail {
        let detail_rows: Vec<Vec<String>> = out
            .detail
            .iter()
            .map(|t| {
                vec![
                    f(t.sweep_value),
                    t.trial.to_string(),
                    t.seed.to_string(),
                    t.method.to_string(),
                    f(t.param),
                    f(t.val_mse),
                    f(t.test_mse),
                    f(t.gain_pct),
                ]
            })
            .collect();
        write_csv(
            ctx.path("trials.csv"),
            &["sweep_value", "trial", "seed", "method", "param", "val_mse", "test_mse", "gain_pct"],
            &detail_rows,
        )?;
    }
    let text = table_text(cfg.sweep_name(), &rows);
    if table {
        fs::write(ctx.path("table_g7.txt"), &text)?;
        write_json(ctx.path("table_g7.json"), &rows)?;
    }
    ctx.say(text.trim_end());
    Ok(Outcome::Success)
}

/// Where the quadratic model comes from.
#[derive(Debug, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum ModelSource {
    /// A design file (`.json` or `.csv`).
    Design { design: PathBuf },
    /// `H` and `b` given directly.
    Normal { h: Vec<Vec<f64>>, b: Vec<f64> },
    /// Diagonal `H = diag(μ)` with `b = μ ⊙ α`.
    Planted { mu: Vec<f64>, alpha: Vec<f64> },
}

impl ModelSource {
    fn build(&self, base: &Path) -> Result<SpectralModel> {
        match self {
            ModelSource::Design { design } => {
                let path = if design.is_absolute() { design.clone() } else { base.join(design) };
                build_spectral_model(&load_design(path)?, None)
            }
            ModelSource::Normal { h, b } => {
                let d = b.len();
                if h.len() != d || h.iter().any(|r| r.len() != d) {
                    return Err(Error::Config("`h` must be a square matrix matching `b`".into()));
                }
                SpectralModel::from_normal_equations(DMatrix::from_fn(d, d, |i, j| h[i][j]), DVector::from_vec(b.clone()), None)
            }
            ModelSource::Planted { mu, alpha } => {
                if mu.len() != alpha.len() || mu.is_empty() {
                    return Err(Error::Config("`mu` and `alpha` must be nonempty and equal length".into()));
                }
                let b = DVector::from_fn(mu.len(), |i, _| mu[i] * alpha[i]);
                SpectralModel::from_normal_equations(DMatrix::from_diagonal(&DVector::from_vec(mu.clone())), b, None)
            }
        }
    }
}

/// Gradient-noise covariance in original coordinates.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NoiseSpec {
    #[default]
    None,
    Isotropic(f64),
    Matrix(Vec<Vec<f64>>),
}

impl NoiseSpec {
    fn build(&self, model: &SpectralModel) -> Result<NoiseModel> {
        let d = model.dim();
        match self {
            NoiseSpec::None => Ok(NoiseModel::zero(d)),
            NoiseSpec::Isotropic(level) => NoiseModel::isotropic(*level, d),
            NoiseSpec::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("noise matrix must be {d}x{d}")));
                }
                NoiseModel::from_original(model, &DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SimulateMode {
    Trajectory,
    Snapshots,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    model: ModelSource,
    law: ResetLaw,
    #[serde(default)]
    noise: NoiseSpec,
    mode: SimulateMode,
    #[serde(default)]
    horizon: Option<f64>,
    #[serde(default)]
    dt: Option<f64>,
    #[serde(default)]
    count: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

fn coord_header(d: usize, first: &str) -> Vec<String> {
    std::iter::once(first.to_string()).chain((1..=d).map(|i| format!("w{i}"))).collect()
}

fn cmd_simulate(ctx: &Ctx, config: &Path) -> Result<Outcome> {
    let cfg: SimulateConfig = read_config(config)?;
    let model = cfg.model.build(&config_dir(config))?;
    let noise = cfg.noise.build(&model)?;
    let seed = ctx.seed_or(cfg.seed.unwrap_or(DEFAULT_SEED));
    let d = model.dim();
    match cfg.mode {
        SimulateMode::Trajectory => {
            let horizon = cfg.horizon.ok_or_else(|| Error::Config("trajectory mode needs `horizon`".into()))?;
            let dt = cfg.dt.ok_or_else(|| Error::Config("trajectory mode needs `dt`".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let path = simulate_trajectory(&model, &cfg.law, &noise, horizon, dt, &mut rng)?;
            let header = coord_header(d, "t");
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = path
                .times
                .iter()
                .zip(&path.states)
                .map(|(t, w)| std::iter::once(f(*t)).chain(w.iter().map(|&x| f(x))).collect())
                .collect();
            write_csv(ctx.path("trajectory.csv"), &header, &rows)?;
            let resets: Vec<Vec<String>> = path.reset_times.iter().map(|&t| vec![f(t)]).collect();
            write_csv(ctx.path("resets.csv"), &["t"], &resets)?;
            ctx.say(format!("{} states, {} resets", path.times.len(), path.reset_times.len()));
        }
        SimulateMode::Snapshots => {
            let count = cfg.count.ok_or_else(|| Error::Config("snapshots mode needs `count`".into()))?;
            let batch = snapshot_batch(&model, &cfg.law, &noise, count, seed, Execution::Parallel)?;
            let header = coord_header(d, "index");
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = (0..count)
                .map(|k| {
                    let w = model.to_original(&batch.samples.row(k).transpose());
                    std::iter::once(k.to_string()).chain(w.iter().map(|&x| f(x))).collect()
                })
                .collect();
            write_csv(ctx.path("snapshots.csv"), &header, &rows)?;
            ctx.progress(format!("{} snapshots in {:?}", count, batch.meta.elapsed));
            ctx.say(format!("{count} snapshots written"));
        }
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentsConfig {
    model: ModelSource,
    law: ResetLaw,
    #[serde(default)]
    noise: NoiseSpec,
    #[serde(default)]
    seed: Option<u64>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_moments(ctx: &Ctx, config: &Path, mc_samples: Option<usize>) -> Result<Outcome> {
    let cfg: MomentsConfig = read_config(config)?;
    let model = cfg.model.build(&config_dir(config))?;
    let noise = cfg.noise.build(&model)?;
    let dec = renewal_covariance(&model, &cfg.law, &noise)?;
    dec.validate()?;
    let d = model.dim();
    let mut report = serde_json::json!({
        "law": cfg.law,
        "mu": model.mu().as_slice(),
        "mean": dec.mean.as_slice(),
        "mean_tilde": dec.mean_tilde.as_slice(),
        "sigma_sgd_tilde": matrix_rows(&dec.sigma_sgd_tilde),
        "sigma_timing_tilde": matrix_rows(&dec.sigma_timing_tilde),
        "total_tilde": matrix_rows(&dec.total_tilde),
        "sigma_sgd": matrix_rows(&dec.sgd_original(&model)),
        "sigma_timing": matrix_rows(&dec.timing_original(&model)),
        "total": matrix_rows(&dec.total),
    });
    if let ResetLaw::Exponential { rate } = cfg.law {
        report["lyapunov_residual"] = lyapunov_residual(&model, rate, &noise, &dec.total, &dec.mean)?.into();
        let snr: Vec<f64> = (0..d).map(|i| snr_ratio(&model, rate, &noise, i)).collect::<Result<_>>()?;
        report["snr_ratio"] = snr.iter().map(|&x| if x.is_finite() { x.into() } else { serde_json::Value::Null }).collect();
    }
    if let Some(m) = mc_samples {
        let seed = ctx.seed_or(cfg.seed.unwrap_or(DEFAULT_SEED));
        let z = crate::verify::monte_carlo_z(&model, &cfg.law, &noise, m, seed, Execution::Parallel)?;
        report["monte_carlo"] = serde_json::json!({ "samples": m, "seed": seed, "max_abs_z": z });
        ctx.say(format!("largest Monte Carlo deviation: {z:.2} SE over {m} snapshots"));
    }
    write_json(ctx.path("moments.json"), &report)?;
    ctx.say(format!("trace of stationary covariance: {:.6}", dec.total.trace()));
    Ok(Outcome::Success)
}

/// Modewise inputs shared by the risk subcommands.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskConfig {
    mu: Vec<f64>,
    alpha: Vec<f64>,
    #[serde(default)]
    sigma_eta: f64,
    #[serde(default)]
    noise_diag: Option<Vec<f64>>,
    /// Realized `b̃`; switches Poisson scans to the conditional risk.
    #[serde(default)]
    b_tilde: Option<Vec<f64>>,
    #[serde(default)]
    estimators: Vec<RiskEstimator>,
    #[serde(default)]
    scan: Option<GridSpec>,
    #[serde(default)]
    r_grid: Option<GridSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RiskEstimator {
    Ridge { lambda: f64 },
    Poisson { rate: f64 },
    Renewal { law: ResetLaw },
}

impl RiskConfig {
    fn noise(&self) -> Vec<f64> {
        self.noise_diag.clone().unwrap_or_else(|| vec![0.0; self.mu.len()])
    }

    fn poisson(&self, r: f64) -> Result<RiskReport> {
        match &self.b_tilde {
            Some(b) => poisson_conditional_risk(&self.mu, b, &self.alpha, &self.noise(), r),
            None => poisson_total_risk(&self.mu, &self.alpha, self.sigma_eta, &self.noise(), r),
        }
    }
}

fn cmd_risk(ctx: &Ctx, config: &Path) -> Result<Outcome> {
    let cfg: RiskConfig = read_config(config)?;
    let noise = cfg.noise();
    let reports = cfg
        .estimators
        .iter()
        .map(|e| match e {
            RiskEstimator::Ridge { lambda } => ridge_risk(&cfg.mu, &cfg.alpha, cfg.sigma_eta, *lambda),
            RiskEstimator::Poisson { rate } => cfg.poisson(*rate),
            RiskEstimator::Renewal { law } => renewal_snapshot_risk(&cfg.mu, &cfg.alpha, cfg.sigma_eta, &noise, law),
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(ctx.path("risk.json"), &reports)?;
    for r in &reports {
        let name = match &r.params.estimator {
            Estimator::Ridge { lambda } => format!("ridge(lambda={lambda})"),
            Estimator::Poisson { rate } => format!("poisson(rate={rate})"),
            Estimator::PoissonConditional { rate } => format!("poisson-conditional(rate={rate})"),
            Estimator::Renewal { law } => law.label(),
        };
        ctx.say(format!("{name}: total risk {:.6}", r.total()));
    }
    if let Some(scan) = &cfg.scan {
        let rows = scan
            .values()?
            .into_iter()
            .map(|r| {
                let t = cfg.poisson(r)?.totals;
                Ok(vec![f(r), f(t.bias_sq), f(t.obs_var), f(t.sgd_var), f(t.timing_var), f(t.total)])
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(ctx.path("risk_scan.csv"), &["r", "bias_sq", "obs_var", "sgd_var", "timing_var", "total"], &rows)?;
        ctx.say(format!("scanned {} rates", rows.len()));
    }
    if reports.is_empty() && cfg.scan.is_none() {
        return Err(Error::Config("risk config needs `estimators` or `scan`".into()));
    }
    Ok(Outcome::Success)
}

fn cmd_optimal_rate(ctx: &Ctx, config: &Path) -> Result<Outcome> {
    let cfg: RiskConfig = read_config(config)?;
    let grid = cfg.r_grid.clone().unwrap_or(GridSpec::logspace(1e-4, 1e4, 161)).values()?;
    let opt = minimize_over_rate(&grid, |r| Ok(cfg.poisson(r)?.total()))?;
    let ridge_at_opt = ridge_risk(&cfg.mu, &cfg.alpha, cfg.sigma_eta, opt.r_star)?.total();
    write_json(
        ctx.path("optimal_rate.json"),
        &serde_json::json!({
            "r_star": opt.r_star,
            "risk_at_r_star": opt.risk_at_r_star,
            "boundary_flag": opt.boundary_flag,
            "conditional": cfg.b_tilde.is_some(),
            "ridge_risk_at_r_star": ridge_at_opt,
        }),
    )?;
    ctx.say(format!(
        "r* = {:.6e}, risk {:.6}{}",
        opt.r_star,
        opt.risk_at_r_star,
        if opt.boundary_flag { " (at grid edge)" } else { "" }
    ));
    Ok(Outcome::Success)
}

fn cmd_landscape(ctx: &Ctx, config: Option<&Path>) -> Result<Outcome> {
    let cfg: LandscapeConfig = match config {
        Some(p) => read_config(p)?,
        None => LandscapeConfig::new(crate::linalg::logspace(0.1, 10.0, 41), crate::linalg::logspace(0.05, 5.0, 41)),
    };
    let cells = risk_landscape(&cfg, Execution::Parallel)?;
    let rows: Vec<Vec<String>> = cells.iter().map(|c| vec![f(c.mu_tau), f(c.nu), c.best_law.clone(), f(c.gain)]).collect();
    write_csv(ctx.path("landscape.csv"), &["mu_tau", "nu", "best_law", "gain"], &rows)?;
    let non_poisson = cells.iter().filter(|c| c.best_law != "poisson").count();
    ctx.say(format!("{} cells, {} favour a non-Poisson law", cells.len(), non_poisson));
    Ok(Outcome::Success)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MismatchConfig {
    laws: Vec<ResetLaw>,
    #[serde(default = "default_pairs")]
    pairs: Vec<(f64, f64)>,
    #[serde(default)]
    mu_grid: Option<GridSpec>,
}

fn default_pairs() -> Vec<(f64, f64)> {
    vec![(1.0, 10.0)]
}

fn cmd_mismatch(ctx: &Ctx, config: Option<&Path>) -> Result<Outcome> {
    let cfg: MismatchConfig = match config {
        Some(p) => read_config(p)?,
        None => MismatchConfig {
            laws: vec![ResetLaw::exponential(1.0)?, ResetLaw::gamma(3.0, 1.0)?, ResetLaw::deterministic(1.0)?],
            pairs: default_pairs(),
            mu_grid: Some(GridSpec::logspace(1e-2, 1e2, 81)),
        },
    };
    let mut rows = Vec::new();
    for law in &cfg.laws {
        for &(weak, strong) in &cfg.pairs {
            let m = two_mode_mismatch(law, weak, strong)?;
            rows.push(vec![law.label(), f(weak), f(strong), f(m.lambda_weak), f(m.lambda_strong), f(m.relative_gap)]);
            ctx.say(format!("{}: mu {weak} vs {strong}, relative gap {:.4}", law.label(), m.relative_gap));
        }
    }
    write_csv(
        ctx.path("mismatch.csv"),
        &["law", "mu_weak", "mu_strong", "lambda_weak", "lambda_strong", "relative_gap"],
        &rows,
    )?;
    if let Some(grid) = &cfg.mu_grid {
        let grid = grid.values()?;
        let labels: Vec<String> = cfg.laws.iter().map(ResetLaw::label).collect();
        let header: Vec<&str> = std::iter::once("mu").chain(labels.iter().map(String::as_str)).collect();
        let rows = grid
            .iter()
            .map(|&m| {
                let mut row = vec![f(m)];
                for law in &cfg.laws {
                    row.push(f(law.effective_penalty(m)?));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        write_csv(ctx.path("lambda_eff.csv"), &header, &rows)?;
    }
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("reset-ridge").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn parses_global_flags() {
        let c = cli(&["experiment", "--config", "a.json", "--seed", "7", "--threads", "2", "--table-g7"]);
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.threads, Some(2));
        assert!(matches!(c.command, Command::Experiment { table_g7: true, detail: false }));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(Outcome::Success)), 0);
        assert_eq!(exit_code(&Ok(Outcome::CheckFailed)), 1);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 2);
    }

    #[test]
    fn slugs_are_filename_safe() {
        assert_eq!(slug("renewal:gamma(k=3,mean=1)"), "renewal_gamma_k_3_mean_1");
    }

    #[test]
    fn model_sources_parse() {
        let s: ModelSource = serde_json::from_str(r#"{"mu": [2, 1], "alpha": [1, 1]}"#).unwrap();
        let m = s.build(Path::new(".")).unwrap();
        assert_eq!(m.b_tilde().len(), 2);
        let s: ModelSource = serde_json::from_str(r#"{"h": [[2, 0], [0, 1]], "b": [1, 1]}"#).unwrap();
        assert!(s.build(Path::new(".")).is_ok());
        let n: NoiseSpec = serde_json::from_str(r#"{"isotropic": 0.5}"#).unwrap();
        assert_eq!(n.build(&m).unwrap().isotropic_level(), Some(0.5));
    }
}
