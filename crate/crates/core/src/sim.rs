//! Trial runner, synthetic pools, evaluation metrics, the closed-form
//! variance model and result export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method, Method, MethodConfig, TrialPoint};
use crate::error::{Error, Result};
use crate::pool::{load_pool, UnitPool};
use crate::predictor::{
    FixedCheckpointPredictor, ImprovingPredictor, NoisyPredictor, OraclePredictor, Predictor, UniformPredictor,
};
use crate::proposal::{ClampMode, ClampPolicy};
use crate::variance::z_for_level;
use crate::weights::{lure_weights, sqrt_weights, WeightScheme};

/// splitmix64 finalizer over (master, index): per-trial streams independent
/// of scheduling order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Uniform,
    Clustered,
}

/// Generator parameters. Clustered pools sit on a ⌈√N⌉-wide virtual grid;
/// each of `clusters` bumps spreads a mass drawn from [0.5, 1.5]·`mass`
/// over the grid with a Gaussian kernel of width `spread` around a random
/// unit, on top of a constant `background`. Uniform pools draw iid values
/// in [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub clusters: usize,
    pub spread: f64,
    pub mass: f64,
    pub background: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for PoolParams {
    fn default() -> Self {
        PoolParams {
            clusters: 3,
            spread: 1.5,
            mass: 200.0,
            background: 1.0,
            lo: 0.0,
            hi: 10.0,
        }
    }
}

pub fn generate_pool(kind: PoolKind, n: usize, params: &PoolParams, seed: u64) -> Result<UnitPool> {
    if n < 2 {
        return Err(Error::Config(format!("generated pools need N >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = match kind {
        PoolKind::Uniform => {
            let PoolParams { lo, hi, .. } = *params;
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::Config(format!("need 0 <= lo <= hi, got lo = {lo}, hi = {hi}")));
            }
            (0..n)
                .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
                .collect::<Vec<f64>>()
        }
        PoolKind::Clustered => clustered_values(n, params, &mut rng)?,
    };
    let mut pool = UnitPool::from_values(&values)?;
    let side = grid_side(n);
    pool = UnitPool::new(
        pool.units()
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mut u = u.clone();
                u.payload_ref = format!("grid:{},{}", i % side, i / side);
                u
            })
            .collect(),
    )?;
    Ok(pool)
}

fn grid_side(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

fn clustered_values(n: usize, p: &PoolParams, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let ok = p.clusters >= 1
        && p.spread.is_finite()
        && p.spread >= 0.0
        && p.mass.is_finite()
        && p.mass >= 0.0
        && p.background.is_finite()
        && p.background >= 0.0;
    if !ok {
        return Err(Error::Config(format!(
            "clustered pool needs clusters >= 1 and nonnegative spread, mass, background; got {p:?}"
        )));
    }
    let side = grid_side(n);
    let coords: Vec<(f64, f64)> = (0..n).map(|i| ((i % side) as f64, (i / side) as f64)).collect();
    let mut values = vec![p.background; n];
    for _ in 0..p.clusters {
        let center = rng.random_range(0..n);
        let mass = p.mass * rng.random_range(0.5..1.5);
        if p.spread == 0.0 {
            values[center] += mass;
            continue;
        }
        let (cx, cy) = coords[center];
        let kernel: Vec<f64> = coords
            .iter()
            .map(|&(x, y)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * p.spread * p.spread)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        for (v, k) in values.iter_mut().zip(&kernel) {
            *v += mass * k / total;
        }
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    File(PathBuf),
    Generated {
        kind: PoolKind,
        n: usize,
        params: PoolParams,
        seed: u64,
    },
}

impl PoolSource {
    pub fn load(&self) -> Result<UnitPool> {
        match self {
            PoolSource::File(path) => load_pool(path),
            PoolSource::Generated { kind, n, params, seed } => generate_pool(*kind, *n, params, *seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Oracle,
    Uniform,
    Noisy,
    Improving,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub bias: f64,
    pub sigma: f64,
    pub decay: f64,
    pub seed: u64,
    pub checkpoints: Option<PathBuf>,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec {
            kind: PredictorKind::Noisy,
            bias: 1.0,
            sigma: 0.5,
            decay: 1.0,
            seed: 2,
            checkpoints: None,
        }
    }
}

impl PredictorSpec {
    pub fn build(&self, pool: &UnitPool) -> Result<Box<dyn Predictor>> {
        Ok(match self.kind {
            PredictorKind::Oracle => Box::new(OraclePredictor),
            PredictorKind::Uniform => Box::new(UniformPredictor),
            PredictorKind::Noisy => Box::new(NoisyPredictor::new(pool.len(), self.bias, self.sigma, self.seed)?),
            PredictorKind::Improving => Box::new(ImprovingPredictor::new(
                pool.len(),
                self.bias,
                self.sigma,
                self.decay,
                self.seed,
            )?),
            PredictorKind::Checkpoint => {
                let path = self
                    .checkpoints
                    .as_ref()
                    .ok_or_else(|| Error::Config("predictor = checkpoint needs checkpoints = <path>".into()))?;
                Box::new(FixedCheckpointPredictor::load(pool, path)?)
            }
        })
    }
}

/// Evaluation steps: explicit t values, or fractions of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Steps(Vec<usize>),
    Fractions(Vec<f64>),
}

impl Grid {
    pub fn resolve(&self, horizon: usize) -> Result<Vec<usize>> {
        let mut ts: Vec<usize> = match self {
            Grid::Steps(ts) => ts.clone(),
            Grid::Fractions(fs) => {
                let mut out = Vec::with_capacity(fs.len());
                for &f in fs {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Config(format!("t fractions must lie in (0, 1], got {f}")));
                    }
                    out.push(((f * horizon as f64).round() as usize).max(1));
                }
                out
            }
        };
        ts.sort_unstable();
        ts.dedup();
        if ts.is_empty() || ts[0] == 0 {
            return Err(Error::Config("t grid must hold positive steps".into()));
        }
        Ok(ts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "json" => Ok(Format::Jsonl),
            other => Err(Error::Config(format!(
                "unknown format {other:?}; expected csv or jsonl"
            ))),
        }
    }
}

/// A harness run. Read from a flat `key = value` file; every key can be
/// overridden afterwards with [`ExperimentConfig::set`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pool: PoolSource,
    pub predictor: PredictorSpec,
    pub method: Method,
    pub scheme: Option<WeightScheme>,
    pub clamp: ClampPolicy,
    pub grid: Grid,
    pub trials: usize,
    pub seed: u64,
    pub level: f64,
    pub retrain_every: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pool: PoolSource::Generated {
                kind: PoolKind::Clustered,
                n: 50,
                params: PoolParams::default(),
                seed: 1,
            },
            predictor: PredictorSpec::default(),
            method: Method::Active,
            scheme: None,
            clamp: ClampPolicy::default(),
            grid: Grid::Fractions(vec![0.1, 0.3, 0.5]),
            trials: 1000,
            seed: 0,
            level: 0.95,
            retrain_every: 1,
            out: None,
            format: Format::Csv,
        }
    }
}

/// Recognized configuration keys.
pub const CONFIG_KEYS: &[&str] = &[
    "pool",
    "pool_path",
    "n",
    "clusters",
    "spread",
    "mass",
    "background",
    "lo",
    "hi",
    "pool_seed",
    "predictor",
    "bias",
    "sigma",
    "decay",
    "predictor_seed",
    "checkpoints",
    "method",
    "scheme",
    "gamma",
    "clamp",
    "clamp_value",
    "t",
    "t_frac",
    "trials",
    "seed",
    "level",
    "retrain_every",
    "out",
    "format",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn generated(&mut self) -> Result<(&mut PoolKind, &mut usize, &mut PoolParams, &mut u64)> {
        if let PoolSource::File(_) = self.pool {
            self.pool = ExperimentConfig::default().pool;
        }
        match &mut self.pool {
            PoolSource::Generated { kind, n, params, seed } => Ok((kind, n, params, seed)),
            PoolSource::File(_) => unreachable!(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pool" => match value {
                "clustered" => *self.generated()?.0 = PoolKind::Clustered,
                "uniform" => *self.generated()?.0 = PoolKind::Uniform,
                path => self.pool = PoolSource::File(PathBuf::from(path)),
            },
            "pool_path" => self.pool = PoolSource::File(PathBuf::from(value)),
            "n" => *self.generated()?.1 = num(key, value)?,
            "clusters" => self.generated()?.2.clusters = num(key, value)?,
            "spread" => self.generated()?.2.spread = num(key, value)?,
            "mass" => self.generated()?.2.mass = num(key, value)?,
            "background" => self.generated()?.2.background = num(key, value)?,
            "lo" => self.generated()?.2.lo = num(key, value)?,
            "hi" => self.generated()?.2.hi = num(key, value)?,
            "pool_seed" => *self.generated()?.3 = num(key, value)?,
            "predictor" => {
                self.predictor.kind = match value {
                    "oracle" => PredictorKind::Oracle,
                    "uniform" => PredictorKind::Uniform,
                    "noisy" => PredictorKind::Noisy,
                    "improving" => PredictorKind::Improving,
                    "checkpoint" => PredictorKind::Checkpoint,
                    other => return Err(Error::Config(format!("unknown predictor {other:?}"))),
                }
            }
            "bias" => self.predictor.bias = num(key, value)?,
            "sigma" => self.predictor.sigma = num(key, value)?,
            "decay" => self.predictor.decay = num(key, value)?,
            "predictor_seed" => self.predictor.seed = num(key, value)?,
            "checkpoints" => self.predictor.checkpoints = Some(PathBuf::from(value)),
            "method" => self.method = value.parse()?,
            "scheme" => {
                let gamma = match self.scheme {
                    Some(WeightScheme::Inv { gamma }) => Some(gamma),
                    _ => None,
                };
                self.scheme = Some(WeightScheme::parse(value, gamma)?);
            }
            "gamma" => self.scheme = Some(WeightScheme::inv(num(key, value)?)?),
            "clamp" => {
                let mode = match value {
                    "floor" => ClampMode::Floor,
                    "offset" => ClampMode::Offset,
                    other => return Err(Error::Config(format!("unknown clamp mode {other:?}"))),
                };
                self.clamp = ClampPolicy::new(mode, self.clamp.value)?;
            }
            "clamp_value" => self.clamp = ClampPolicy::new(self.clamp.mode, num(key, value)?)?,
            "t" => self.grid = Grid::Steps(list(key, value)?),
            "t_frac" => self.grid = Grid::Fractions(list(key, value)?),
            "trials" => self.trials = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "level" => self.level = num(key, value)?,
            "retrain_every" => self.retrain_every = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "format" => self.format = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme.unwrap_or_else(|| self.method.default_scheme())
    }

    pub fn method_config(&self) -> MethodConfig {
        MethodConfig {
            method: self.method,
            scheme: self.scheme(),
            clamp: self.clamp,
            level: self.level,
            retrain_every: self.retrain_every,
        }
    }

    /// Effective configuration as `key = value` lines; parses back to an
    /// equal configuration.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        match &self.pool {
            PoolSource::File(p) => {
                let _ = writeln!(s, "pool_path = {}", p.display());
            }
            PoolSource::Generated { kind, n, params, seed } => {
                let kind = match kind {
                    PoolKind::Clustered => "clustered",
                    PoolKind::Uniform => "uniform",
                };
                let _ = writeln!(s, "pool = {kind}\nn = {n}\nclusters = {}", params.clusters);
                let _ = writeln!(
                    s,
                    "spread = {:?}\nmass = {:?}\nbackground = {:?}\nlo = {:?}\nhi = {:?}\npool_seed = {seed}",
                    params.spread, params.mass, params.background, params.lo, params.hi
                );
            }
        }
        let pk = match self.predictor.kind {
            PredictorKind::Oracle => "oracle",
            PredictorKind::Uniform => "uniform",
            PredictorKind::Noisy => "noisy",
            PredictorKind::Improving => "improving",
            PredictorKind::Checkpoint => "checkpoint",
        };
        let _ = writeln!(
            s,
            "predictor = {pk}\nbias = {:?}\nsigma = {:?}\ndecay = {:?}\npredictor_seed = {}",
            self.predictor.bias, self.predictor.sigma, self.predictor.decay, self.predictor.seed
        );
        if let Some(p) = &self.predictor.checkpoints {
            let _ = writeln!(s, "checkpoints = {}", p.display());
        }
        let _ = writeln!(s, "method = {}", self.method);
        match self.scheme {
            Some(WeightScheme::Inv { gamma }) => {
                let _ = writeln!(s, "scheme = inv\ngamma = {gamma:?}");
            }
            Some(other) => {
                let _ = writeln!(s, "scheme = {}", other.name());
            }
            None => {}
        }
        let mode = match self.clamp.mode {
            ClampMode::Floor => "floor",
            ClampMode::Offset => "offset",
        };
        let _ = writeln!(s, "clamp = {mode}\nclamp_value = {:?}", self.clamp.value);
        match &self.grid {
            Grid::Steps(ts) => {
                let v: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                let _ = writeln!(s, "t = {}", v.join(","));
            }
            Grid::Fractions(fs) => {
                let v: Vec<String> = fs.iter().map(|f| format!("{f:?}")).collect();
                let _ = writeln!(s, "t_frac = {}", v.join(","));
            }
        }
        let _ = writeln!(
            s,
            "trials = {}\nseed = {}\nlevel = {:?}\nretrain_every = {}",
            self.trials, self.seed, self.level, self.retrain_every
        );
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out = {}", p.display());
        }
        let fmt = match self.format {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        };
        let _ = writeln!(s, "format = {fmt}");
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        crate::estimator::RunConfig {
            scheme: self.scheme(),
            clamp: self.clamp,
            level: self.level,
            retrain_every: self.retrain_every,
            ..Default::default()
        }
        .validate()
    }
}

/// Everything a trial needs, built once and shared across workers.
pub struct Experiment {
    pub pool: Arc<UnitPool>,
    pub predictor: Box<dyn Predictor>,
    pub method: MethodConfig,
    pub grid: Vec<usize>,
    pub total: f64,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = Arc::new(cfg.pool.load()?);
        let total = pool.total_true()?;
        let grid = cfg.grid.resolve(pool.len())?;
        if cfg.method.is_wor() && grid.last().is_some_and(|&t| t > pool.len()) {
            return Err(Error::Config(format!(
                "t = {} exceeds the pool size {}",
                grid.last().unwrap(),
                pool.len()
            )));
        }
        Ok(Experiment {
            predictor: cfg.predictor.build(&pool)?,
            pool,
            method: cfg.method_config(),
            grid,
            total,
        })
    }

    pub fn with_method(&self, method: MethodConfig) -> ExperimentView<'_> {
        ExperimentView { exp: self, method }
    }

    /// One trial's points, seeded by `derive_seed(master, index)`.
    pub fn trial(&self, master: u64, index: u64) -> Result<Vec<TrialPoint>> {
        self.with_method(self.method).trial(master, index)
    }

    /// `trials` trials in parallel; result order follows trial index.
    pub fn run(&self, master: u64, trials: usize) -> Result<Vec<Vec<TrialPoint>>> {
        self.with_method(self.method).run(master, trials)
    }
}

/// An experiment evaluated under a different method configuration.
pub struct ExperimentView<'a> {
    exp: &'a Experiment,
    method: MethodConfig,
}

impl ExperimentView<'_> {
    pub fn trial(&self, master: u64, index: u64) -> Result<Vec<TrialPoint>> {
        let mut rng = trial_rng(master, index);
        run_method(
            &self.method,
            &self.exp.pool,
            &*self.exp.predictor,
            &self.exp.grid,
            &mut rng,
        )
    }

    pub fn run(&self, master: u64, trials: usize) -> Result<Vec<Vec<TrialPoint>>> {
        (0..trials as u64)
            .into_par_iter()
            .map(|m| self.trial(master, m))
            .collect()
    }
}

/// Aggregated metrics at one t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub scheme: String,
    pub t: usize,
    pub fractional_error_mean: f64,
    pub fractional_error_se: f64,
    /// Coverage of the conditional-variance interval.
    pub coverage: f64,
    /// Coverage of the simple-variance interval.
    pub coverage_simple: f64,
    pub ci_radius_mean_relative: f64,
    pub estimate_mean: f64,
    pub estimate_se: f64,
    pub trials: usize,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "method",
    "scheme",
    "t",
    "fractional_error_mean",
    "fractional_error_se",
    "coverage",
    "coverage_simple",
    "ci_radius_mean_relative",
    "estimate_mean",
    "estimate_se",
    "trials",
];

/// (1/M)·Σ |F̂ − F| / F.
pub fn fractional_error(estimates: &[f64], f_true: f64) -> Result<f64> {
    if !(f_true > 0.0) {
        return Err(Error::Domain(format!("fractional error needs F > 0, got {f_true}")));
    }
    if estimates.is_empty() {
        return Err(Error::Precondition("no estimates".into()));
    }
    Ok(estimates.iter().map(|e| (e - f_true).abs() / f_true).sum::<f64>() / estimates.len() as f64)
}

/// Fraction of trials with |F̂ − F| ≤ z·√Var̂.
pub fn coverage(estimates: &[f64], var_hats: &[f64], f_true: f64, level: f64) -> Result<f64> {
    if estimates.len() != var_hats.len() {
        return Err(Error::Shape(format!(
            "{} estimates for {} variances",
            estimates.len(),
            var_hats.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Precondition("no estimates".into()));
    }
    let z = z_for_level(level)?;
    let hits = estimates
        .iter()
        .zip(var_hats)
        .filter(|(e, v)| (*e - f_true).abs() <= z * v.max(0.0).sqrt())
        .count();
    Ok(hits as f64 / estimates.len() as f64)
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Reduces per-trial points (one inner vec per trial, aligned on the grid)
/// to one row per t.
pub fn aggregate(method: &MethodConfig, trials: &[Vec<TrialPoint>], f_true: f64) -> Result<Vec<MetricsRow>> {
    let Some(first) = trials.first() else {
        return Ok(Vec::new());
    };
    let z = z_for_level(method.level)?;
    let scheme = if method.method == Method::Active || method.method.is_wor() {
        method.scheme.name()
    } else if method.method == Method::DisAis {
        "sqrt".to_string()
    } else {
        "uniform".to_string()
    };
    let mut rows = Vec::with_capacity(first.len());
    for (k, p0) in first.iter().enumerate() {
        let mut est = Vec::with_capacity(trials.len());
        let mut vc = Vec::with_capacity(trials.len());
        let mut vs = Vec::with_capacity(trials.len());
        for trial in trials {
            let p = trial
                .get(k)
                .filter(|p| p.t == p0.t)
                .ok_or_else(|| Error::Shape("trials disagree on the t grid".into()))?;
            est.push(p.estimate);
            vc.push(p.var_cond);
            vs.push(p.var_simp);
        }
        let errs: Vec<f64> = est.iter().map(|e| (e - f_true).abs() / f_true).collect();
        let (fe, fe_se) = mean_se(&errs);
        let (em, em_se) = mean_se(&est);
        let radius = vc.iter().map(|v| z * v.max(0.0).sqrt() / f_true).sum::<f64>() / vc.len() as f64;
        rows.push(MetricsRow {
            method: method.method.name().to_string(),
            scheme: scheme.clone(),
            t: p0.t,
            fractional_error_mean: fe,
            fractional_error_se: fe_se,
            coverage: coverage(&est, &vc, f_true, method.level)?,
            coverage_simple: coverage(&est, &vs, f_true, method.level)?,
            ci_radius_mean_relative: radius,
            estimate_mean: em,
            estimate_se: em_se,
            trials: trials.len(),
        });
    }
    Ok(rows)
}

/// Runs the configured experiment and aggregates per t.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let exp = Experiment::new(cfg)?;
    let trials = exp.run(cfg.seed, cfg.trials)?;
    aggregate(&exp.method, &trials, exp.total)
}

/// Weight family w_τ of the variance model V_τ = c·τ^(−y)/w_τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    /// w_τ = 1/((N−τ)(N−τ+1)).
    Lure,
    /// w_τ = 1.
    Uniform,
}

/// Step weighting compared under the variance model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScheme {
    /// √τ
    Sqrt,
    /// w_τ
    Family,
    /// w_τ·√τ
    Comb,
    /// τ^y·w_τ, the inverse true variance.
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceModelConfig {
    pub y: f64,
    pub family: WeightFamily,
    pub c: f64,
    pub ts: Vec<usize>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub scheme: ModelScheme,
    pub y: f64,
    pub t: usize,
    pub ratio: f64,
}

/// Var[F̂_{1:t}] under each scheme divided by the inverse-variance optimum,
/// for V_τ = c·τ^(−y)/w_τ: (Σ ᾱ_τ² V_τ)·(Σ 1/V_τ).
pub fn variance_model_compare(cfg: &VarianceModelConfig, schemes: &[ModelScheme]) -> Result<Vec<RatioRow>> {
    if !(0.0..=1.0).contains(&cfg.y) {
        return Err(Error::Precondition(format!("y must lie in [0, 1], got {}", cfg.y)));
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(Error::Precondition(format!("c must be positive, got {}", cfg.c)));
    }
    let t_max = cfg.ts.iter().copied().max().unwrap_or(0);
    if cfg.family == WeightFamily::Lure && t_max >= cfg.n {
        return Err(Error::Singular {
            tau: t_max,
            horizon: cfg.n,
        });
    }
    let fam: Vec<f64> = match cfg.family {
        WeightFamily::Lure => lure_weights(t_max, cfg.n)?,
        WeightFamily::Uniform => vec![1.0; t_max],
    };
    let sq = sqrt_weights(t_max);
    let var: Vec<f64> = (0..t_max)
        .map(|i| cfg.c * ((i + 1) as f64).powf(-cfg.y) / fam[i])
        .collect();
    let mut rows = Vec::new();
    for &t in &cfg.ts {
        if t == 0 {
            return Err(Error::Precondition("t must be positive".into()));
        }
        let inv_sum: f64 = var[..t].iter().map(|v| 1.0 / v).sum();
        for &scheme in schemes {
            let raw: Vec<f64> = (0..t)
                .map(|i| match scheme {
                    ModelScheme::Sqrt => sq[i],
                    ModelScheme::Family => fam[i],
                    ModelScheme::Comb => fam[i] * sq[i],
                    ModelScheme::Optimal => 1.0 / var[i],
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let v: f64 = raw.iter().zip(&var[..t]).map(|(w, v)| (w / total).powi(2) * v).sum();
            rows.push(RatioRow {
                scheme,
                y: cfg.y,
                t,
                ratio: v * inv_sum,
            });
        }
    }
    Ok(rows)
}

/// Writes rows as CSV or JSON lines. `header` lines are written first as
/// `# ` comments; an empty row set still gets the CSV column header.
pub fn export_results(rows: &[MetricsRow], path: impl AsRef<Path>, format: Format, header: &str) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    write_results(&mut file, rows, format, header)?;
    file.flush()?;
    Ok(())
}

pub fn write_results<W: Write>(out: &mut W, rows: &[MetricsRow], format: Format, header: &str) -> Result<()> {
    for line in header.lines() {
        writeln!(out, "# {line}")?;
    }
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
            w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
            for row in rows {
                w.serialize(row).map_err(csv_err)?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            for row in rows {
                serde_json::to_writer(&mut *out, row)?;
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Reads rows written by [`export_results`], skipping `#` comment lines.
pub fn read_results(path: impl AsRef<Path>, format: Format) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path)?;
    match format {
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
            r.deserialize()
                .enumerate()
                .map(|(i, row)| {
                    row.map_err(|e| Error::Parse {
                        line: i + 2,
                        message: e.to_string(),
                    })
                })
                .collect()
        }
        Format::Jsonl => {
            let mut rows = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?);
            }
            Ok(rows)
        }
    }
}
