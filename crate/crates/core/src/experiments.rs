//! Monte Carlo prediction experiments: spiked and block covariance designs,
//! validation tuning of spectral filters, and paired gains over ridge.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_nonnegative, ensure_positive, Error, Result};
use crate::filters::FilterSpec;
use crate::io::GridSpec;
use crate::laws::ResetLaw;
use crate::parallel::Execution;
use crate::spectral::{DesignData, SpectralModel};

/// A tunable filter family. Renewal families read the grid value as a reset rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Ridge,
    Exponential,
    Erlang(u32),
    Periodic,
    Cutoff,
}

pub const METHOD_NAMES: &str = "ridge, exponential, erlang-<k>, periodic, cutoff";

impl Method {
    /// Filter at grid value `g`: `λ = g`, rate `g` (mean interval `1/g`), or threshold `g`.
    pub fn filter(&self, g: f64) -> Result<FilterSpec> {
        Ok(match *self {
            Method::Ridge => FilterSpec::ridge(g)?,
            Method::Exponential => FilterSpec::renewal(ResetLaw::exponential(g)?),
            Method::Erlang(k) => FilterSpec::renewal(ResetLaw::gamma(k as f64, 1.0 / g)?),
            Method::Periodic => FilterSpec::renewal(ResetLaw::deterministic(1.0 / g)?),
            Method::Cutoff => FilterSpec::cutoff(g)?,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ridge => f.write_str("ridge"),
            Method::Exponential => f.write_str("exponential"),
            Method::Erlang(k) => write!(f, "erlang-{k}"),
            Method::Periodic => f.write_str("periodic"),
            Method::Cutoff => f.write_str("cutoff"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown method `{s}`; valid methods: {METHOD_NAMES}"));
        match s {
            "ridge" => Ok(Method::Ridge),
            "exponential" => Ok(Method::Exponential),
            "periodic" => Ok(Method::Periodic),
            "cutoff" => Ok(Method::Cutoff),
            _ => {
                let k: u32 = s.strip_prefix("erlang-").and_then(|k| k.parse().ok()).ok_or_else(unknown)?;
                if k == 0 {
                    return Err(unknown());
                }
                Ok(Method::Erlang(k))
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Which Hessian the filters see: `XᵀX` or `XᵀX / n_train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianConvention {
    #[default]
    Unnormalized,
    Normalized,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikedConfig {
    pub spike_strengths: Vec<f64>,
    pub spike_coeffs: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sigma_eta: f64,
    pub gamma_grid: Vec<f64>,
    pub trials: usize,
    pub tuning_grid: GridSpec,
    pub methods: Vec<Method>,
    pub hessian: HessianConvention,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
}

impl Default for SpikedConfig {
    fn default() -> Self {
        SpikedConfig {
            spike_strengths: vec![12.0, 5.0],
            spike_coeffs: vec![2.0, 1.0],
            n_train: 80,
            n_val: 800,
            n_test: 5000,
            sigma_eta: 1.0,
            gamma_grid: (1..=15).map(|i| 0.25 * i as f64).collect(),
            trials: 200,
            tuning_grid: GridSpec::logspace(1e-3, 1e2, 180),
            methods: vec![Method::Ridge, Method::Periodic, Method::Erlang(3), Method::Cutoff],
            hessian: HessianConvention::Unnormalized,
            base_seed: default_seed(),
        }
    }
}

impl SpikedConfig {
    pub fn dim(&self, gamma: f64) -> usize {
        (gamma * self.n_train as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        let k = self.spike_strengths.len();
        if k == 0 || self.spike_coeffs.len() != k {
            return Err(Error::Config("spike_strengths and spike_coeffs must be nonempty and equal length".into()));
        }
        for &l in &self.spike_strengths {
            ensure_positive("spike strength", l).map_err(to_config)?;
        }
        for &g in &self.gamma_grid {
            ensure_positive("gamma", g).map_err(to_config)?;
            let d = self.dim(g);
            if d < 2 || d < k {
                return Err(Error::Config(format!("gamma {g} gives d = {d}; need d >= 2 and d >= {k} spikes")));
            }
        }
        check_common(self.n_train, self.n_val, self.n_test, self.sigma_eta, self.trials, &self.gamma_grid, &self.methods)
    }

    /// Draws fresh spike directions, then train, validation and test sets.
    pub fn generate<R: Rng + ?Sized>(&self, gamma: f64, rng: &mut R) -> Result<DataSplit> {
        let d = self.dim(gamma);
        if d < 2 || d < self.spike_strengths.len() {
            return Err(Error::Parameter(format!("gamma {gamma} gives d = {d}, too small")));
        }
        let k = self.spike_strengths.len();
        let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = g.qr().q();
        let beta0 = &u * DVector::from_column_slice(&self.spike_coeffs);
        let stretch: Vec<f64> = self.spike_strengths.iter().map(|l| l.sqrt() - 1.0).collect();
        let mut draw = |n: usize| {
            let z = gaussian_rows(rng, n, d);
            let proj = &z * &u;
            let mut x = z;
            for (j, s) in stretch.iter().enumerate() {
                x += proj.column(j) * u.column(j).transpose() * *s;
            }
            labelled(rng, x, &beta0, self.sigma_eta)
        };
        Ok(DataSplit { train: draw(self.n_train)?, val: draw(self.n_val)?, test: draw(self.n_test)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub signal_block: usize,
    pub nuisance_block: usize,
    pub rho_sig: f64,
    pub rho_nui: f64,
    pub rho_cross: f64,
    pub coeffs: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub sigma_eta: f64,
    pub b_grid: Vec<usize>,
    pub trials: usize,
    pub tuning_grid: GridSpec,
    pub methods: Vec<Method>,
    pub hessian: HessianConvention,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            signal_block: 6,
            nuisance_block: 8,
            rho_sig: 0.80,
            rho_nui: 0.45,
            rho_cross: 0.02,
            coeffs: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
            n_train: 60,
            n_val: 180,
            n_test: 1200,
            sigma_eta: 2.0,
            b_grid: vec![0, 2, 4, 6, 8, 10, 12],
            trials: 60,
            tuning_grid: GridSpec::logspace(1e-3, 1e2, 60),
            methods: vec![Method::Ridge, Method::Periodic, Method::Erlang(5), Method::Erlang(2), Method::Cutoff],
            hessian: HessianConvention::Unnormalized,
            base_seed: default_seed(),
        }
    }
}

impl BlockConfig {
    pub fn dim(&self, b: usize) -> usize {
        self.signal_block + b * self.nuisance_block
    }

    /// Unit-diagonal block covariance with `b` nuisance blocks.
    pub fn covariance(&self, b: usize) -> DMatrix<f64> {
        let d = self.dim(b);
        let block = |i: usize| {
            if i < self.signal_block {
                0
            } else {
                1 + (i - self.signal_block) / self.nuisance_block
            }
        };
        DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if block(i) != block(j) {
                self.rho_cross
            } else if block(i) == 0 {
                self.rho_sig
            } else {
                self.rho_nui
            }
        })
    }

    fn cholesky(&self, b: usize) -> Result<DMatrix<f64>> {
        Cholesky::new(self.covariance(b))
            .map(|c| c.l())
            .ok_or_else(|| Error::Config(format!("block covariance with B = {b} is not positive definite")))
    }

    fn validate(&self) -> Result<()> {
        if self.signal_block == 0 || self.coeffs.len() != self.signal_block {
            return Err(Error::Config("coeffs must have one entry per signal-block feature".into()));
        }
        if self.nuisance_block == 0 {
            return Err(Error::Config("nuisance_block must be at least 1".into()));
        }
        for &b in &self.b_grid {
            self.cholesky(b)?;
        }
        let values: Vec<f64> = self.b_grid.iter().map(|&b| b as f64).collect();
        check_common(self.n_train, self.n_val, self.n_test, self.sigma_eta, self.trials, &values, &self.methods)
    }

    pub fn generate<R: Rng + ?Sized>(&self, b: usize, rng: &mut R) -> Result<DataSplit> {
        let l = self.cholesky(b)?;
        let d = self.dim(b);
        let mut beta0 = DVector::zeros(d);
        beta0.rows_mut(0, self.signal_block).copy_from_slice(&self.coeffs);
        let lt = l.transpose();
        let mut draw = |n: usize| {
            let x = gaussian_rows(rng, n, d) * &lt;
            labelled(rng, x, &beta0, self.sigma_eta)
        };
        Ok(DataSplit { train: draw(self.n_train)?, val: draw(self.n_val)?, test: draw(self.n_test)? })
    }
}

fn to_config(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn check_common(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    sigma_eta: f64,
    trials: usize,
    sweep: &[f64],
    methods: &[Method],
) -> Result<()> {
    if n_train == 0 || n_val == 0 || n_test == 0 || trials == 0 {
        return Err(Error::Config("sample sizes and trials must be at least 1".into()));
    }
    if trials < 2 {
        return Err(Error::Config("at least 2 trials are needed for standard errors".into()));
    }
    ensure_nonnegative("sigma_eta", sigma_eta).map_err(to_config)?;
    if sweep.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if !methods.contains(&Method::Ridge) {
        return Err(Error::Config("methods must include ridge as the baseline".into()));
    }
    Ok(())
}

fn gaussian_rows<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            z[(i, j)] = rng.sample(StandardNormal);
        }
    }
    z
}

fn labelled<R: Rng + ?Sized>(rng: &mut R, x: DMatrix<f64>, beta0: &DVector<f64>, sigma: f64) -> Result<DesignData> {
    let noise = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal) * sigma);
    let y = &x * beta0 + noise;
    DesignData::new(x, y)?.with_truth(beta0.clone(), sigma)
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: DesignData,
    pub val: DesignData,
    pub test: DesignData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "lowercase")]
pub enum ExperimentConfig {
    Spiked(SpikedConfig),
    Block(BlockConfig),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Spiked(c) => c.validate(),
            ExperimentConfig::Block(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Spiked(_) => "spiked",
            ExperimentConfig::Block(_) => "block",
        }
    }

    /// Name of the swept quantity (`gamma` or `B`).
    pub fn sweep_name(&self) -> &'static str {
        match self {
            ExperimentConfig::Spiked(_) => "gamma",
            ExperimentConfig::Block(_) => "B",
        }
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        match self {
            ExperimentConfig::Spiked(c) => c.gamma_grid.clone(),
            ExperimentConfig::Block(c) => c.b_grid.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn methods(&self) -> &[Method] {
        match self {
            ExperimentConfig::Spiked(c) => &c.methods,
            ExperimentConfig::Block(c) => &c.methods,
        }
    }

    pub fn trials(&self) -> usize {
        match self {
            ExperimentConfig::Spiked(c) => c.trials,
            ExperimentConfig::Block(c) => c.trials,
        }
    }

    pub fn base_seed(&self) -> u64 {
        match self {
            ExperimentConfig::Spiked(c) => c.base_seed,
            ExperimentConfig::Block(c) => c.base_seed,
        }
    }

    pub fn set_base_seed(&mut self, seed: u64) {
        match self {
            ExperimentConfig::Spiked(c) => c.base_seed = seed,
            ExperimentConfig::Block(c) => c.base_seed = seed,
        }
    }

    fn hessian(&self) -> HessianConvention {
        match self {
            ExperimentConfig::Spiked(c) => c.hessian,
            ExperimentConfig::Block(c) => c.hessian,
        }
    }

    fn tuning_grid(&self) -> Result<Vec<f64>> {
        match self {
            ExperimentConfig::Spiked(c) => c.tuning_grid.values(),
            ExperimentConfig::Block(c) => c.tuning_grid.values(),
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, sweep_value: f64, rng: &mut R) -> Result<DataSplit> {
        match self {
            ExperimentConfig::Spiked(c) => c.generate(sweep_value, rng),
            ExperimentConfig::Block(c) => c.generate(sweep_value as usize, rng),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Marchenko-Pastur law for unit-variance entries at aspect ratio `γ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarchenkoPastur {
    pub gamma: f64,
    pub lower_edge: f64,
    pub upper_edge: f64,
    pub mass_at_zero: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub fn marchenko_pastur(gamma: f64, lambda_grid: &[f64]) -> Result<MarchenkoPastur> {
    ensure_positive("gamma", gamma)?;
    let lo = (1.0 - gamma.sqrt()).powi(2);
    let hi = (1.0 + gamma.sqrt()).powi(2);
    let density = lambda_grid
        .iter()
        .map(|&l| {
            if l > lo && l < hi {
                ((hi - l) * (l - lo)).sqrt() / (2.0 * std::f64::consts::PI * gamma * l)
            } else {
                0.0
            }
        })
        .collect();
    Ok(MarchenkoPastur {
        gamma,
        lower_edge: lo,
        upper_edge: hi,
        mass_at_zero: (1.0 - 1.0 / gamma).max(0.0),
        grid: lambda_grid.to_vec(),
        density,
    })
}

/// A training fit reused across every method and grid value of a trial.
pub struct TuningContext {
    model: SpectralModel,
    /// Validation design rotated into the training eigenbasis.
    xv_v: DMatrix<f64>,
    yv: DVector<f64>,
}

impl TuningContext {
    pub fn new(train: &DesignData, val: &DesignData, hessian: HessianConvention) -> Result<Self> {
        train.validate()?;
        val.validate()?;
        if train.d() != val.d() {
            return Err(Error::Input("train and validation dimensions differ".into()));
        }
        let mut h = train.x.transpose() * &train.x;
        let mut b = train.x.transpose() * &train.y;
        if hessian == HessianConvention::Normalized {
            let n = train.n() as f64;
            h /= n;
            b /= n;
        }
        let model = SpectralModel::from_normal_equations(h, b, None)?;
        let xv_v = &val.x * model.v();
        Ok(TuningContext { model, xv_v, yv: val.y.clone() })
    }

    pub fn model(&self) -> &SpectralModel {
        &self.model
    }

    fn coefficients(&self, filter: &FilterSpec) -> DVector<f64> {
        let m = &self.model;
        DVector::from_fn(m.dim(), |i, _| {
            if m.is_null(i) {
                0.0
            } else {
                filter.value(m.mu()[i]) * m.w_star_tilde()[i]
            }
        })
    }

    pub fn val_mse(&self, filter: &FilterSpec) -> f64 {
        let resid = &self.xv_v * self.coefficients(filter) - &self.yv;
        resid.norm_squared() / resid.len() as f64
    }

    /// Grid argmin of validation MSE; ties go to the smaller grid value.
    pub fn tune(&self, method: Method, grid: &[f64]) -> Result<Tuned> {
        let mut best: Option<(f64, f64)> = None;
        for &g in grid {
            let v = self.val_mse(&method.filter(g)?);
            if best.is_none_or(|(_, bv)| v < bv) {
                best = Some((g, v));
            }
        }
        let (param, val_mse) = best.ok_or_else(|| Error::Parameter("tuning grid is empty".into()))?;
        let weights = self.model.to_original(&self.coefficients(&method.filter(param)?));
        Ok(Tuned { method, param, val_mse, weights })
    }
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub method: Method,
    pub param: f64,
    pub val_mse: f64,
    /// Fitted weights in original coordinates.
    pub weights: DVector<f64>,
}

/// Fits on `train` and picks the grid value with the lowest validation MSE.
pub fn tune_on_validation(
    train: &DesignData,
    val: &DesignData,
    method: Method,
    grid: &[f64],
    hessian: HessianConvention,
) -> Result<Tuned> {
    TuningContext::new(train, val, hessian)?.tune(method, grid)
}

/// Mean of `(x·w − y)²` over a data set (includes the label noise).
pub fn prediction_mse(data: &DesignData, w: &DVector<f64>) -> f64 {
    let resid = &data.x * w - &data.y;
    resid.norm_squared() / data.n() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub param: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// `100 (mse_ridge − mse) / mse_ridge` for this trial.
    pub gain_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_mse: f64,
    pub se_mse: f64,
    pub gain_pct: f64,
    pub se_gain_pct: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub experiment: String,
    pub sweep_value: f64,
    pub trials: usize,
    pub config_hash: String,
    pub methods: Vec<MethodSummary>,
}

impl SweepResult {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub results: Vec<SweepResult>,
    pub detail: Vec<TrialRecord>,
}

/// One trial: fresh data from `seed`, every method tuned on the same split.
pub fn run_trial(config: &ExperimentConfig, sweep_value: f64, trial: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = config.generate(sweep_value, &mut rng)?;
    let grid = config.tuning_grid()?;
    let ctx = TuningContext::new(&split.train, &split.val, config.hessian())?;
    let fits = config
        .methods()
        .iter()
        .map(|&m| {
            let t = ctx.tune(m, &grid)?;
            let test = prediction_mse(&split.test, &t.weights);
            Ok((t, test))
        })
        .collect::<Result<Vec<_>>>()?;
    let ridge = fits.iter().find(|(t, _)| t.method == Method::Ridge).map(|f| f.1).expect("ridge is validated");
    Ok(fits
        .into_iter()
        .map(|(t, test)| TrialRecord {
            sweep_value,
            trial,
            seed,
            method: t.method,
            param: t.param,
            val_mse: t.val_mse,
            test_mse: test,
            gain_pct: 100.0 * (ridge - test) / ridge,
        })
        .collect())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs every trial at every sweep value. Trial `t` uses seed `base_seed + t`,
/// and results are collected in `(sweep value, trial)` order.
pub fn run_sweep(config: &ExperimentConfig, exec: Execution) -> Result<SweepOutput> {
    config.validate()?;
    let values = config.sweep_values();
    let trials = config.trials();
    let base = config.base_seed();
    let per_trial = exec.try_map_indexed(values.len() * trials, |idx| {
        let t = idx % trials;
        run_trial(config, values[idx / trials], t, base.wrapping_add(t as u64))
    })?;
    let hash = config.hash();
    let results = values
        .iter()
        .enumerate()
        .map(|(vi, &value)| {
            let rows = &per_trial[vi * trials..(vi + 1) * trials];
            let methods = config
                .methods()
                .iter()
                .enumerate()
                .map(|(mi, &method)| {
                    let mse: Vec<f64> = rows.iter().map(|r| r[mi].test_mse).collect();
                    let gain: Vec<f64> = rows.iter().map(|r| r[mi].gain_pct).collect();
                    let (mean_mse, se_mse) = mean_se(&mse);
                    let (gain_pct, se_gain_pct) = mean_se(&gain);
                    MethodSummary {
                        method,
                        mean_mse,
                        se_mse,
                        gain_pct,
                        se_gain_pct,
                        ci95_low: gain_pct - 1.96 * se_gain_pct,
                        ci95_high: gain_pct + 1.96 * se_gain_pct,
                    }
                })
                .collect();
            SweepResult {
                experiment: config.name().to_string(),
                sweep_value: value,
                trials,
                config_hash: hash.clone(),
                methods,
            }
        })
        .collect();
    Ok(SweepOutput { results, detail: per_trial.into_iter().flatten().collect() })
}
