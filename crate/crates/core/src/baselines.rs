//! Comparison estimators: simple Monte Carlo, detector-based importance
//! sampling with and without replacement, adaptive refits, active-testing
//! acquisition and the prediction-powered estimator.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{run_active_measurement, RunConfig};
use crate::pool::{LabeledSet, UnitPool};
use crate::predictor::{FrozenPredictor, OracleLossPredictor, Predictor, UniformPredictor};
use crate::proposal::{build_proposal, ClampPolicy, PredictionTable, Proposal};
use crate::weights::{normalize, sqrt_weights, WeightScheme};

/// Estimation method selectable by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Without-replacement IS with the adaptive predictor.
    Active,
    Mc,
    McWor,
    Dis,
    DisAis,
    DisWor,
    ActiveTesting,
    Ppi,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Active,
        Method::Mc,
        Method::McWor,
        Method::Dis,
        Method::DisAis,
        Method::DisWor,
        Method::ActiveTesting,
        Method::Ppi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Active => "active",
            Method::Mc => "mc",
            Method::McWor => "mc_wor",
            Method::Dis => "dis",
            Method::DisAis => "dis_ais",
            Method::DisWor => "dis_wor",
            Method::ActiveTesting => "active_testing",
            Method::Ppi => "ppi",
        }
    }

    /// Whether units are sampled without replacement through the main loop.
    pub fn is_wor(self) -> bool {
        matches!(
            self,
            Method::Active | Method::McWor | Method::DisWor | Method::ActiveTesting
        )
    }

    /// Step weighting used when the configuration does not name one.
    pub fn default_scheme(self) -> WeightScheme {
        match self {
            Method::Active => WeightScheme::Comb,
            _ => WeightScheme::Lure,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .or(match key.as_str() {
                "active_measurement" | "am" => Some(Method::Active),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// (N/t)·Σ f(s_i) over a uniform with-replacement sample.
pub fn mc_estimate(values: &[f64], n: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    Ok(n as f64 * values.iter().sum::<f64>() / values.len() as f64)
}

/// (1/t)·Σ f(s_i)/q(s_i) over an iid sample from a fixed proposal.
pub fn dis_estimate(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let mut total = 0.0;
    for &(f, q) in samples {
        if !(q > 0.0) {
            return Err(Error::Domain(format!("proposal probability must be positive, got {q}")));
        }
        total += f / q;
    }
    Ok(total / samples.len() as f64)
}

/// Σ_Ω g − (N/t)·Σ (g(s_τ) − f(s_τ)) over uniform iid pairs (g, f).
pub fn ppi_estimate(g_total: f64, paired: &[(f64, f64)], n: usize) -> Result<f64> {
    if paired.is_empty() {
        return Err(Error::Precondition("need at least one sample".into()));
    }
    let resid: f64 = paired.iter().map(|(g, f)| g - f).sum();
    Ok(g_total - n as f64 * resid / paired.len() as f64)
}

/// q ∝ clamp(|f − g|) over the unlabeled units.
pub fn active_testing_acquisition(
    pool: &UnitPool,
    base: &PredictionTable,
    unlabeled: &[usize],
    clamp: ClampPolicy,
) -> Result<Proposal> {
    let losses = OracleLossPredictor::new(base, pool)?.predict(pool, &LabeledSet::new(pool.len()))?;
    build_proposal(pool, &losses, unlabeled, clamp)
}

/// Estimate and variance estimates of one trial at one t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub t: usize,
    pub estimate: f64,
    pub var_cond: f64,
    pub var_simp: f64,
}

/// Settings shared by every method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub scheme: WeightScheme,
    pub clamp: ClampPolicy,
    pub level: f64,
    pub retrain_every: usize,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        let base = RunConfig::default();
        MethodConfig {
            method,
            scheme: method.default_scheme(),
            clamp: base.clamp,
            level: base.level,
            retrain_every: base.retrain_every,
        }
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            scheme: self.scheme,
            clamp: self.clamp,
            level: self.level,
            retrain_every: self.retrain_every,
            ..RunConfig::default()
        }
    }
}

/// Runs one trial of `cfg.method` on a simulation pool and reports the
/// estimate at each t in `grid` (ascending). `predictor` is the adaptive
/// model; fixed-proposal methods freeze its prediction on the empty
/// labeled set.
pub fn run_method<R: Rng + ?Sized>(
    cfg: &MethodConfig,
    pool: &Arc<UnitPool>,
    predictor: &dyn Predictor,
    grid: &[usize],
    rng: &mut R,
) -> Result<Vec<TrialPoint>> {
    let t_max = match grid.last() {
        Some(&t) => t,
        None => return Ok(Vec::new()),
    };
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return Err(Error::Config("t grid must be positive and strictly increasing".into()));
    }
    let n = pool.len();
    if cfg.method.is_wor() && t_max > n {
        return Err(Error::Exhausted(n));
    }
    let empty = LabeledSet::new(n);
    match cfg.method {
        Method::Active => wor_points(cfg, pool, predictor, grid, rng),
        Method::McWor => wor_points(cfg, pool, &UniformPredictor, grid, rng),
        Method::DisWor => {
            let frozen = FrozenPredictor::new(predictor, pool)?;
            wor_points(cfg, pool, &frozen, grid, rng)
        }
        Method::ActiveTesting => {
            let base = predictor.predict(pool, &empty)?;
            let loss = OracleLossPredictor::new(&base, pool)?;
            wor_points(cfg, pool, &loss, grid, rng)
        }
        Method::Mc => {
            let truth = pool.true_values()?;
            let scale = n as f64;
            iid_points(grid, false, |_| {
                let i = rng.random_range(0..n);
                Ok(scale * truth[i])
            })
        }
        Method::Ppi => {
            let truth = pool.true_values()?;
            let g = dense(&predictor.predict(pool, &empty)?, pool)?;
            let g_total: f64 = g.iter().sum();
            let scale = n as f64;
            iid_points(grid, false, |_| {
                let i = rng.random_range(0..n);
                Ok(g_total - scale * (g[i] - truth[i]))
            })
        }
        Method::Dis => {
            let truth = pool.true_values()?;
            let all: Vec<usize> = (0..n).collect();
            let q = build_proposal(pool, &predictor.predict(pool, &empty)?, &all, cfg.clamp)?;
            iid_points(grid, false, |_| {
                let (i, p) = q.sample(rng);
                Ok(truth[i] / p)
            })
        }
        Method::DisAis => {
            let truth = pool.true_values()?;
            let all: Vec<usize> = (0..n).collect();
            let mut seen = LabeledSet::new(n);
            let mut q: Option<Proposal> = None;
            iid_points(grid, true, |step| {
                if q.is_none() || (step - 1) % cfg.retrain_every == 0 {
                    q = Some(build_proposal(pool, &predictor.predict(pool, &seen)?, &all, cfg.clamp)?);
                }
                let (i, p) = q.as_ref().expect("built above").sample(rng);
                if !seen.contains(i) {
                    seen.insert(pool, i, truth[i])?;
                }
                Ok(truth[i] / p)
            })
        }
    }
}

fn dense(table: &PredictionTable, pool: &UnitPool) -> Result<Vec<f64>> {
    (0..pool.len())
        .map(|i| table.get(i).ok_or_else(|| Error::Coverage(pool.unit(i).id.clone())))
        .collect()
}

fn wor_points<R: Rng + ?Sized>(
    cfg: &MethodConfig,
    pool: &Arc<UnitPool>,
    predictor: &dyn Predictor,
    grid: &[usize],
    rng: &mut R,
) -> Result<Vec<TrialPoint>> {
    let t_max = *grid.last().expect("nonempty grid");
    let run = run_active_measurement(
        pool.clone(),
        predictor,
        cfg.run_config(),
        t_max,
        rng,
        LabeledSet::new(pool.len()),
    )?;
    Ok(grid
        .iter()
        .map(|&t| {
            let r = &run.reports()[t - 1];
            TrialPoint {
                t,
                estimate: r.estimate,
                var_cond: r.var_cond,
                var_simp: r.var_simp,
            }
        })
        .collect())
}

/// Draws per-sample estimates x_1, x_2, ... and combines them uniformly, or
/// by the square-root law when `sqrt_law`. Both variance fields hold
/// Σ ᾱ_i² (x_i − x̄)².
fn iid_points<F>(grid: &[usize], sqrt_law: bool, mut draw: F) -> Result<Vec<TrialPoint>>
where
    F: FnMut(usize) -> Result<f64>,
{
    let t_max = *grid.last().expect("nonempty grid");
    let mut xs = Vec::with_capacity(t_max);
    let mut out = Vec::with_capacity(grid.len());
    let mut next = grid.iter().peekable();
    for step in 1..=t_max {
        xs.push(draw(step)?);
        if next.peek() == Some(&&step) {
            next.next();
            let w = if sqrt_law {
                normalize(&sqrt_weights(step))?
            } else {
                vec![1.0 / step as f64; step]
            };
            let est: f64 = xs.iter().zip(&w).map(|(x, w)| x * w).sum();
            let var: f64 = xs
                .iter()
                .zip(&w)
                .map(|(x, w)| {
                    let d = x - est;
                    w * w * d * d
                })
                .sum();
            out.push(TrialPoint {
                t: step,
                estimate: est,
                var_cond: var,
                var_simp: var,
            });
        }
    }
    Ok(out)
}
