//! Executable property checks: the closed-form bound, unbiasedness of the
//! estimator and of the variance estimator, streaming equivalence,
//! interval coverage, and the orderings between weightings and methods.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::estimator::{run_active_measurement, PlugInMean, RunConfig, RunState};
use crate::pool::{LabeledSet, UnitPool};
use crate::predictor::{ImprovingPredictor, NoisyPredictor, OraclePredictor, Predictor};
use crate::proposal::PredictionTable;
use crate::sim::{
    derive_seed, generate_pool, mean_se, trial_rng, variance_model_compare, ModelScheme, PoolKind, PoolParams,
    VarianceModelConfig, WeightFamily,
};
use crate::variance::{var_single, var_tau, z_for_level, ProposalHistory, VarianceAccumulator};
use crate::weights::{lure_weights, worst_case_ratio, WeightScheme};

/// Result of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Bound,
    Unbiased,
    Streaming,
    Coverage,
    Weighting,
    Baselines,
    Variance,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "bound" => Suite::Bound,
            "unbiased" => Suite::Unbiased,
            "streaming" => Suite::Streaming,
            "coverage" => Suite::Coverage,
            "weighting" => Suite::Weighting,
            "baselines" => Suite::Baselines,
            "variance" => Suite::Variance,
            "all" => Suite::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown suite {other:?}; expected bound, unbiased, streaming, coverage, weighting, baselines, variance or all"
                )))
            }
        })
    }
}

/// Trial counts for the Monte Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckScale {
    pub unbiased_trials: usize,
    pub coverage_trials: usize,
    pub ordering_trials: usize,
    pub streaming_runs: usize,
    pub seed: u64,
}

impl Default for CheckScale {
    fn default() -> Self {
        CheckScale {
            unbiased_trials: 20_000,
            coverage_trials: 5_000,
            ordering_trials: 10_000,
            streaming_runs: 200,
            seed: 20_240_601,
        }
    }
}

impl CheckScale {
    /// Every trial count replaced by `trials`.
    pub fn with_trials(trials: usize) -> Self {
        CheckScale {
            unbiased_trials: trials,
            coverage_trials: trials,
            ordering_trials: trials,
            ..Self::default()
        }
    }
}

pub fn run_suite(suite: Suite, scale: &CheckScale) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Bound {
        out.extend(check_bound()?);
    }
    if all || suite == Suite::Unbiased {
        out.extend(check_unbiased(scale.unbiased_trials, scale.seed)?);
        out.push(check_zero_covariance(scale.unbiased_trials, scale.seed)?);
        out.push(check_oracle_exact(200, scale.seed)?);
        out.push(check_exhaustion(scale.seed)?);
        out.push(check_variance_unbiased()?);
    }
    if all || suite == Suite::Streaming {
        out.push(check_streaming_equivalence(scale.streaming_runs, scale.seed)?);
        out.push(check_streaming_cost()?);
    }
    if all || suite == Suite::Coverage {
        out.extend(check_coverage(scale.coverage_trials, scale.seed)?);
    }
    if all || suite == Suite::Weighting {
        out.extend(check_weighting(scale.ordering_trials, scale.seed)?);
    }
    if all || suite == Suite::Baselines {
        out.extend(check_baselines(scale.ordering_trials, scale.seed)?);
        out.extend(check_baseline_chain(scale.ordering_trials, scale.seed)?);
        out.extend(check_baselines_unbiased(scale.unbiased_trials, scale.seed)?);
    }
    if all || suite == Suite::Variance {
        out.push(check_variance_envelope(scale.coverage_trials, scale.seed)?);
        out.push(check_variance_decay(scale.coverage_trials, scale.seed)?);
    }
    Ok(out)
}

/// N = 50 clustered pool with background 1.
pub fn standard_pool() -> Result<Arc<UnitPool>> {
    Ok(Arc::new(generate_pool(
        PoolKind::Clustered,
        50,
        &PoolParams::default(),
        1,
    )?))
}

pub fn standard_predictor(pool: &UnitPool) -> Result<NoisyPredictor> {
    NoisyPredictor::new(pool.len(), 1.0, 0.5, 2)
}

/// N = 200 clustered pool used for the weighting and method comparisons.
pub fn ordering_pool() -> Result<Arc<UnitPool>> {
    let params = PoolParams {
        clusters: 6,
        spread: 1.5,
        mass: 400.0,
        background: 1.0,
        ..PoolParams::default()
    };
    Ok(Arc::new(generate_pool(PoolKind::Clustered, 200, &params, 7)?))
}

pub fn ordering_predictor(pool: &UnitPool) -> Result<ImprovingPredictor> {
    ImprovingPredictor::new(pool.len(), 1.0, 1.5, 1.0, 3)
}

fn sd(xs: &[f64]) -> f64 {
    mean_se(xs).1 * (xs.len() as f64).sqrt()
}

/// Worst-case ratio for LURE and uniform weight families, and the model
/// comparison for COMB over a grid of decay rates.
pub fn check_bound() -> Result<Vec<CheckOutcome>> {
    const LIMIT: f64 = 1.125 + 1e-9;
    let mut out = Vec::new();
    for family in [WeightFamily::Lure, WeightFamily::Uniform] {
        let mut worst: f64 = 0.0;
        let mut evaluated = 0usize;
        for n in [10usize, 100, 1_000, 10_000] {
            let t_max = (n - 1).min(5_000);
            let w = match family {
                WeightFamily::Lure => lure_weights(t_max, n)?,
                WeightFamily::Uniform => vec![1.0; t_max],
            };
            // prefix sums make the whole sweep linear
            let (mut s0, mut s1, mut sh) = (0.0, 0.0, 0.0);
            for t in 1..=t_max {
                let tau = t as f64;
                s0 += w[t - 1];
                s1 += w[t - 1] * tau;
                sh += w[t - 1] * tau.sqrt();
                let r = s0 * s1 / (sh * sh);
                worst = worst.max(r);
                evaluated += 1;
            }
            // spot-check the prefix sums against the direct function
            for t in [1, t_max / 2 + 1, t_max] {
                let direct = worst_case_ratio(&w, t)?;
                worst = worst.max(direct);
            }
        }
        out.push(CheckOutcome::new(
            format!("bound/worst_case_ratio/{family:?}").to_lowercase(),
            worst <= LIMIT,
            format!("max ratio {worst:.12} over {evaluated} (N, t) pairs, limit 1.125"),
        ));
    }
    for family in [WeightFamily::Lure, WeightFamily::Uniform] {
        let mut worst: f64 = 0.0;
        for n in [10usize, 100, 1_000, 10_000] {
            let ts: Vec<usize> = (1..=(n - 1).min(2_000)).collect();
            for y in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let cfg = VarianceModelConfig {
                    y,
                    family,
                    c: 1.0,
                    ts: ts.clone(),
                    n,
                };
                for row in variance_model_compare(&cfg, &[ModelScheme::Comb])? {
                    worst = worst.max(row.ratio);
                }
            }
        }
        out.push(CheckOutcome::new(
            format!("bound/variance_model_comb/{family:?}").to_lowercase(),
            worst <= LIMIT,
            format!("max COMB/optimal ratio {worst:.12} over y in {{0, .25, .5, .75, 1}}"),
        ));
    }
    Ok(out)
}

/// Estimates at `grid` for `trials` seeded runs.
fn standard_runs(
    pool: &Arc<UnitPool>,
    pred: &dyn Predictor,
    scheme: WeightScheme,
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<RunState>> {
    (0..trials as u64)
        .into_par_iter()
        .map(|m| {
            run_active_measurement(
                pool.clone(),
                pred,
                RunConfig::with_scheme(scheme),
                steps,
                &mut trial_rng(seed, m),
                LabeledSet::new(pool.len()),
            )
        })
        .collect()
}

/// Mean of F̂_{1:t} within 3 standard errors of F(Ω).
pub fn check_unbiased(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let total = pool.total_true()?;
    let grid = [10usize, 25, 40];
    let mut out = Vec::new();
    for scheme in [WeightScheme::Sqrt, WeightScheme::Lure, WeightScheme::Comb] {
        let runs = standard_runs(&pool, &pred, scheme, 40, trials, seed)?;
        for &t in &grid {
            let est: Vec<f64> = runs.iter().map(|r| r.combined()[t - 1]).collect();
            let (mean, se) = mean_se(&est);
            let dev = (mean - total).abs();
            out.push(CheckOutcome::new(
                format!("unbiased/{}/t={t}", scheme.name()),
                dev <= 3.0 * se,
                format!(
                    "mean {mean:.4} vs F {total:.4}: |diff| = {:.2} SE (M = {trials})",
                    dev / se
                ),
            ));
        }
    }
    Ok(out)
}

/// Empirical Cov(F̂_5, F̂_20) within 3 standard errors of zero.
pub fn check_zero_covariance(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let runs = standard_runs(&pool, &pred, WeightScheme::Comb, 20, trials, seed ^ 0x5EED)?;
    let a: Vec<f64> = runs.iter().map(|r| r.estimates()[4]).collect();
    let b: Vec<f64> = runs.iter().map(|r| r.estimates()[19]).collect();
    let (ma, _) = mean_se(&a);
    let (mb, _) = mean_se(&b);
    let prods: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let (cov, se) = mean_se(&prods);
    let corr = cov / (sd(&a) * sd(&b));
    Ok(CheckOutcome::new(
        "unbiased/zero_covariance/tau=5,r=20",
        cov.abs() <= 3.0 * se,
        format!("cov {cov:.4} = {:.2} SE (corr {corr:.4}, M = {trials})", cov.abs() / se),
    ))
}

/// Oracle predictions make every estimate exact.
pub fn check_oracle_exact(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let pool = standard_pool()?;
    let total = pool.total_true()?;
    let mut worst: f64 = 0.0;
    for scheme in [
        WeightScheme::Sqrt,
        WeightScheme::Lure,
        WeightScheme::Comb,
        WeightScheme::Inv { gamma: 0.5 },
    ] {
        for run in standard_runs(&pool, &OraclePredictor, scheme, pool.len(), trials, seed)? {
            for (c, e) in run.combined().iter().zip(run.estimates()) {
                worst = worst.max((c - total).abs() / total).max((e - total).abs() / total);
            }
        }
    }
    Ok(CheckOutcome::new(
        "unbiased/oracle_zero_variance",
        worst <= 1e-9,
        format!("max relative error {worst:.3e} at every t of {trials} runs per scheme"),
    ))
}

/// t = N recovers F(Ω) for every without-replacement method and weighting.
pub fn check_exhaustion(seed: u64) -> Result<CheckOutcome> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let total = pool.total_true()?;
    let n = pool.len();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for method in Method::ALL.into_iter().filter(|m| m.is_wor()) {
        for scheme in [
            WeightScheme::Sqrt,
            WeightScheme::Lure,
            WeightScheme::Comb,
            WeightScheme::Inv { gamma: 0.5 },
        ] {
            let cfg = MethodConfig {
                scheme,
                ..MethodConfig::new(method)
            };
            for m in 0..10 {
                let pts = run_method(&cfg, &pool, &pred, &[n], &mut trial_rng(seed, m))?;
                worst = worst.max((pts[0].estimate - total).abs() / total);
                cases += 1;
            }
        }
    }
    Ok(CheckOutcome::new(
        "unbiased/exhaustion",
        worst <= 1e-9,
        format!("max relative error {worst:.3e} at t = N over {cases} runs"),
    ))
}

/// Predictions that depend on which units have been labeled.
pub struct HistoryPredictor;

impl Predictor for HistoryPredictor {
    fn predict(&self, pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable> {
        let key: usize = labeled.entries().iter().map(|&(i, _)| 3 * i + 1).sum::<usize>() + labeled.len();
        let values = (0..pool.len())
            .map(|i| 0.5 + (((i + 2) * (key + 3) * 7) % 11) as f64)
            .collect();
        PredictionTable::dense(values)
    }
}

struct Trajectory {
    prob: f64,
    run: RunState,
    // streaming Var̂_τ after each step t < N
    snaps: Vec<Vec<f64>>,
}

fn enumerate(
    run: RunState,
    pred: &dyn Predictor,
    prob: f64,
    snaps: Vec<Vec<f64>>,
    out: &mut Vec<Trajectory>,
) -> Result<()> {
    if run.is_exhausted() {
        out.push(Trajectory { prob, run, snaps });
        return Ok(());
    }
    let mut run = run;
    let table = pred.predict(run.pool(), run.labeled())?;
    run.push_predictions(&table)?;
    let proposal = run.proposal()?.clone();
    let truth = run.pool().true_values()?;
    for (&u, &q) in proposal.support().iter().zip(proposal.probs()) {
        let mut next = run.clone();
        next.observe(u, truth[u])?;
        let mut s = snaps.clone();
        if !next.is_exhausted() {
            s.push(next.var_taus().to_vec());
        }
        enumerate(next, pred, prob * q, s, out)?;
    }
    Ok(())
}

/// Worst relative deviation between E[Var̂ | D_τ] and Var[F̂_τ | D_τ] over
/// every trajectory of an N-unit pool, for the single estimates Var̂_{τ,r},
/// the naive mixture and the streaming registers.
pub fn variance_unbiasedness_gap(values: &[f64], pred: &dyn Predictor) -> Result<f64> {
    let pool = Arc::new(UnitPool::from_values(values)?);
    let n = pool.len();
    let total = pool.total_true()?;
    let config = RunConfig {
        plug_in: PlugInMean::Exact,
        ..RunConfig::with_scheme(WeightScheme::Comb)
    };
    let mut trajs = Vec::new();
    enumerate(
        RunState::new(pool.clone(), config, LabeledSet::new(n))?,
        pred,
        1.0,
        Vec::new(),
        &mut trajs,
    )?;
    let mass: f64 = trajs.iter().map(|t| t.prob).sum();
    if (mass - 1.0).abs() > 1e-12 {
        return Err(Error::State(format!("trajectory probabilities sum to {mass}")));
    }
    let scale = total * total;
    let mut worst: f64 = 0.0;
    let mut compare = |expected: f64, target: f64| {
        let gap = if target.abs() > 1e-300 {
            (expected - target).abs() / target.abs()
        } else {
            (expected - target).abs() / scale
        };
        worst = worst.max(gap);
    };
    for tau in 1..=n {
        let mut groups: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
        for (k, tr) in trajs.iter().enumerate() {
            let prefix: Vec<usize> = (1..tau).map(|r| tr.run.unit_at(r)).collect();
            groups.entry(prefix).or_default().push(k);
        }
        for members in groups.values() {
            let first = &trajs[members[0]].run;
            let g = total - first.partial_before(tau);
            let target: f64 = (0..n)
                .filter_map(|u| first.q_at(tau, u).map(|q| (u, q)))
                .map(|(u, q)| {
                    let d = values[u] / q - g;
                    q * d * d
                })
                .sum();
            let p_group: f64 = members.iter().map(|&k| trajs[k].prob).sum();
            let cond = |f: &dyn Fn(&Trajectory) -> Result<f64>| -> Result<f64> {
                let mut acc = 0.0;
                for &k in members {
                    acc += trajs[k].prob * f(&trajs[k])?;
                }
                Ok(acc / p_group)
            };
            for r in tau..=n {
                compare(cond(&|tr| var_single(&tr.run, tau, r, g))?, target);
            }
            for t in tau..n {
                compare(cond(&|tr| var_tau(&tr.run, tau, t, g))?, target);
                compare(cond(&|tr| Ok(tr.snaps[t - 1][tau - 1]))?, target);
            }
        }
    }
    Ok(worst)
}

/// Exhaustive enumeration on N ∈ {3, 4, 5} with the exact plug-in mean.
pub fn check_variance_unbiased() -> Result<CheckOutcome> {
    let base = [2.0, 0.0, 5.0, 1.5, 3.0];
    let mut worst: f64 = 0.0;
    for n in 3..=5 {
        let values = &base[..n];
        worst = worst.max(variance_unbiasedness_gap(values, &HistoryPredictor)?);
        let noisy = NoisyPredictor::new(n, 1.0, 0.7, 11)?;
        worst = worst.max(variance_unbiasedness_gap(values, &noisy)?);
    }
    Ok(CheckOutcome::new(
        "unbiased/variance_estimator_enumeration",
        worst <= 1e-10,
        format!("max relative gap {worst:.3e} over all (tau, r, t), N in {{3, 4, 5}}"),
    ))
}

/// Largest relative disagreement between the streaming registers and the
/// naive per-τ mixture over every step of one run.
pub fn streaming_gap(
    run_len: usize,
    pool: &Arc<UnitPool>,
    pred: &dyn Predictor,
    scheme: WeightScheme,
    seed: u64,
) -> Result<f64> {
    let mut run = RunState::new(
        pool.clone(),
        RunConfig::with_scheme(scheme),
        LabeledSet::new(pool.len()),
    )?;
    let mut rng = trial_rng(seed, 0);
    let truth = pool.true_values()?;
    let mut worst: f64 = 0.0;
    for t in 1..=run_len.min(pool.len() - 1) {
        let table = pred.predict(pool, run.labeled())?;
        run.push_predictions(&table)?;
        let (u, _) = run.draw(&mut rng)?;
        run.observe(u, truth[u])?;
        let prev = if t >= 2 {
            run.combined()[t - 2]
        } else {
            run.estimates()[0]
        };
        for tau in 1..=t {
            let naive = var_tau(&run, tau, t, prev - run.partial_before(tau))?;
            let fast = run.var_taus()[tau - 1];
            let g = prev - run.partial_before(tau);
            // an exactly cancelled residual is compared on the scale of the
            // cancelled terms
            let scale = if naive == 0.0 { g * g } else { naive.abs() };
            let gap = (fast - naive).abs() / scale.max(f64::MIN_POSITIVE);
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Random runs: streaming Var̂_τ equals the naive O(t²) computation.
pub fn check_streaming_equivalence(runs: usize, seed: u64) -> Result<CheckOutcome> {
    let gaps = (0..runs as u64)
        .into_par_iter()
        .map(|m| {
            let s = derive_seed(seed, m);
            let n = 8 + (s % 33) as usize;
            let kind = if s.is_multiple_of(2) {
                PoolKind::Clustered
            } else {
                PoolKind::Uniform
            };
            let pool = Arc::new(generate_pool(kind, n, &PoolParams::default(), s)?);
            let scheme = match (s >> 8) % 4 {
                0 => WeightScheme::Sqrt,
                1 => WeightScheme::Lure,
                2 => WeightScheme::Comb,
                _ => WeightScheme::Inv { gamma: 0.5 },
            };
            let steps = n - 1;
            if (s >> 12).is_multiple_of(2) {
                let pred = NoisyPredictor::new(n, 1.0, 0.8, s)?;
                streaming_gap(steps, &pool, &pred, scheme, s)
            } else {
                let pred = ImprovingPredictor::new(n, 1.2, 1.0, 1.0, s)?;
                streaming_gap(steps, &pool, &pred, scheme, s)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "streaming/equivalence",
        worst <= 1e-8,
        format!("max relative gap {worst:.3e} over {runs} runs, every (tau, t)"),
    ))
}

/// Seconds for one streaming update at step t, best of several repeats.
pub fn time_streaming_update(t: usize) -> Result<f64> {
    let n = 2 * t + 10;
    let mut acc = VarianceAccumulator::with_capacity(t);
    let q: Vec<f64> = (1..=t).map(|k| 1.0 / (n - k + 1) as f64).collect();
    for step in 1..t {
        let beta = crate::weights::lure_weight(step, n)?;
        acc.streaming_update(
            step,
            1.0 + (step % 7) as f64,
            q[step - 1],
            beta,
            |tau| q[tau - 1],
            |_| 3.0,
        )?;
    }
    let beta = crate::weights::lure_weight(t, n)?;
    let reps = (200_000 / t).max(5);
    let mut best = f64::INFINITY;
    for _ in 0..7 {
        let mut total = 0.0;
        for _ in 0..reps {
            let mut a = acc.clone();
            let start = Instant::now();
            a.streaming_update(t, 2.0, q[t - 1], beta, |tau| q[tau - 1], |_| 3.0)?;
            total += start.elapsed().as_secs_f64();
            std::hint::black_box(&a);
        }
        best = best.min(total / reps as f64);
    }
    Ok(best)
}

/// Least-squares slope of log time against log t.
pub fn fitted_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in points {
        num += (x.ln() - mx) * (y.ln() - my);
        den += (x.ln() - mx).powi(2);
    }
    num / den
}

pub fn check_streaming_cost() -> Result<CheckOutcome> {
    let ts = [100usize, 1_000, 10_000];
    let mut pts = Vec::new();
    for &t in &ts {
        pts.push((t as f64, time_streaming_update(t)?));
    }
    let slope = fitted_exponent(&pts);
    let desc: Vec<String> = pts.iter().map(|(t, s)| format!("t={t}: {:.2}us", s * 1e6)).collect();
    Ok(CheckOutcome::new(
        "streaming/per_step_cost",
        slope <= 1.3,
        format!("fitted exponent {slope:.3} ({})", desc.join(", ")),
    ))
}

/// 95% interval coverage from both variance estimates at t/N ≥ 0.3.
pub fn check_coverage(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let total = pool.total_true()?;
    let n = pool.len();
    let z = z_for_level(0.95)?;
    let runs = standard_runs(&pool, &pred, WeightScheme::Comb, n - 1, trials, seed ^ 0xC0)?;
    let mut out = Vec::new();
    for t in (15..n).step_by(5).chain([n - 1]) {
        let mut hits = [0usize; 2];
        for run in &runs {
            let r = &run.reports()[t - 1];
            let dev = (r.estimate - total).abs();
            hits[0] += usize::from(dev <= z * r.var_cond.sqrt());
            hits[1] += usize::from(dev <= z * r.var_simp.sqrt());
        }
        for (k, label) in ["cond", "simple"].iter().enumerate() {
            let c = hits[k] as f64 / trials as f64;
            out.push(CheckOutcome::new(
                format!("coverage/{label}/t={t}"),
                (0.90..=0.98).contains(&c),
                format!("coverage {c:.4} (M = {trials}), target [0.90, 0.98]"),
            ));
        }
    }
    Ok(out)
}

/// Paired fractional-error differences: mean and standard error of
/// (a − b) over trials that share their random stream.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_se(&d)
}

fn errors(
    pool: &Arc<UnitPool>,
    pred: &dyn Predictor,
    cfg: &MethodConfig,
    grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let total = pool.total_true()?;
    let per_trial = (0..trials as u64)
        .into_par_iter()
        .map(|m| run_method(cfg, pool, pred, grid, &mut trial_rng(seed, m)))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..grid.len())
        .map(|k| {
            per_trial
                .iter()
                .map(|p| (p[k].estimate - total).abs() / total)
                .collect()
        })
        .collect())
}

/// Weighting comparisons on the ordering pool with an improving predictor.
pub fn check_weighting(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = ordering_pool()?;
    let pred = ordering_predictor(&pool)?;
    let n = pool.len();
    let grid = [n / 20, n / 10, n / 2, n * 7 / 10];
    let run = |scheme: WeightScheme| {
        let cfg = MethodConfig {
            scheme,
            ..MethodConfig::new(Method::Active)
        };
        errors(&pool, &pred, &cfg, &grid, trials, seed)
    };
    let comb = run(WeightScheme::Comb)?;
    let lure = run(WeightScheme::Lure)?;
    let sqrt = run(WeightScheme::Sqrt)?;
    let inv5 = run(WeightScheme::Inv { gamma: 0.5 })?;
    let inv9 = run(WeightScheme::Inv { gamma: 0.9 })?;
    let mean = |xs: &[f64]| mean_se(xs).0;
    let mut out = Vec::new();

    let (d, se) = paired(&lure[0], &comb[0]);
    out.push(CheckOutcome::new(
        format!("weighting/lure_vs_comb/t={}", grid[0]),
        d >= 2.0 * se,
        format!(
            "LURE/COMB = {:.4}, paired diff {d:.5} = {:.2} SE",
            mean(&lure[0]) / mean(&comb[0]),
            d / se
        ),
    ));
    let (d, se) = paired(&sqrt[3], &comb[3]);
    out.push(CheckOutcome::new(
        format!("weighting/sqrt_vs_comb/t={}", grid[3]),
        d >= 2.0 * se,
        format!(
            "SQRT/COMB = {:.4}, paired diff {d:.5} = {:.2} SE",
            mean(&sqrt[3]) / mean(&comb[3]),
            d / se
        ),
    ));
    let ratio = mean(&inv5[2]) / mean(&comb[2]);
    out.push(CheckOutcome::new(
        format!("weighting/inv0.5_vs_comb/t={}", grid[2]),
        ratio <= 1.05,
        format!("INV(0.5)/COMB = {ratio:.4}, limit 1.05"),
    ));
    let (d, se) = paired(&inv9[1], &inv5[1]);
    out.push(CheckOutcome::new(
        format!("weighting/inv0.9_vs_inv0.5/t={}", grid[1]),
        d >= 2.0 * se,
        format!(
            "INV(0.9)/INV(0.5) = {:.4}, paired diff {d:.5} = {:.2} SE",
            mean(&inv9[1]) / mean(&inv5[1]),
            d / se
        ),
    ));
    Ok(out)
}

/// Active measurement against every baseline at t/N = 0.3.
pub fn check_baselines(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = ordering_pool()?;
    let pred = ordering_predictor(&pool)?;
    let t = pool.len() * 3 / 10;
    let active = errors(&pool, &pred, &MethodConfig::new(Method::Active), &[t], trials, seed)?;
    let (am, _) = mean_se(&active[0]);
    let mut out = Vec::new();
    for method in Method::ALL.into_iter().filter(|&m| m != Method::Active) {
        let other = errors(&pool, &pred, &MethodConfig::new(method), &[t], trials, seed)?;
        let (om, _) = mean_se(&other[0]);
        let (d, se) = paired(&other[0], &active[0]);
        out.push(CheckOutcome::new(
            format!("baselines/active_vs_{method}/t={t}"),
            d >= 2.0 * se,
            format!(
                "active {am:.5} vs {method} {om:.5}: diff {d:.5} = {:.2} SE (M = {trials})",
                d / se
            ),
        ));
    }
    Ok(out)
}

/// The chains active ≤ DIS+WOR ≤ DIS and active ≤ DIS+AIS ≤ DIS at
/// t/N ∈ {0.1, 0.3}.
pub fn check_baseline_chain(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = ordering_pool()?;
    let pred = ordering_predictor(&pool)?;
    let n = pool.len();
    let grid = [n / 10, n * 3 / 10];
    let mut errs = HashMap::new();
    for method in [Method::Active, Method::DisWor, Method::DisAis, Method::Dis] {
        errs.insert(
            method,
            errors(&pool, &pred, &MethodConfig::new(method), &grid, trials, seed)?,
        );
    }
    let mut out = Vec::new();
    let links = [
        (Method::Active, Method::DisWor),
        (Method::DisWor, Method::Dis),
        (Method::Active, Method::DisAis),
        (Method::DisAis, Method::Dis),
    ];
    for (k, &t) in grid.iter().enumerate() {
        for (lo, hi) in links {
            let (d, se) = paired(&errs[&hi][k], &errs[&lo][k]);
            out.push(CheckOutcome::new(
                format!("baselines/chain/{lo}_le_{hi}/t={t}"),
                d >= 2.0 * se,
                format!(
                    "{lo} {:.5} vs {hi} {:.5}: diff {d:.5} = {:.2} SE (M = {trials})",
                    mean_se(&errs[&lo][k]).0,
                    mean_se(&errs[&hi][k]).0,
                    d / se
                ),
            ));
        }
    }
    Ok(out)
}

/// Every unbiased baseline on the standard pool: mean within 3 SE of F(Ω).
/// ACTIVE_TESTING and INV weighting are checked for consistency instead:
/// error shrinks along t and vanishes at exhaustion.
pub fn check_baselines_unbiased(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let total = pool.total_true()?;
    let n = pool.len();
    let mut out = Vec::new();
    let grid = [10usize, 25];
    for method in [
        Method::Mc,
        Method::McWor,
        Method::Dis,
        Method::DisAis,
        Method::DisWor,
        Method::Ppi,
    ] {
        let cfg = MethodConfig::new(method);
        let points = (0..trials as u64)
            .into_par_iter()
            .map(|m| run_method(&cfg, &pool, &pred, &grid, &mut trial_rng(seed ^ 0xBA5E, m)))
            .collect::<Result<Vec<_>>>()?;
        for (k, &t) in grid.iter().enumerate() {
            let est: Vec<f64> = points.iter().map(|p| p[k].estimate).collect();
            let (mean, se) = mean_se(&est);
            let dev = (mean - total).abs();
            out.push(CheckOutcome::new(
                format!("baselines/unbiased/{method}/t={t}"),
                dev <= 3.0 * se,
                format!(
                    "mean {mean:.4} vs F {total:.4}: |diff| = {:.2} SE (M = {trials})",
                    dev / se
                ),
            ));
        }
    }
    let consistency = [
        MethodConfig::new(Method::ActiveTesting),
        MethodConfig {
            scheme: WeightScheme::Inv { gamma: 0.5 },
            ..MethodConfig::new(Method::Active)
        },
    ];
    let grid = [5usize, 25, 45, n];
    for cfg in consistency {
        let errs = errors(&pool, &pred, &cfg, &grid, trials.min(5000), seed ^ 0xC0DE)?;
        let means: Vec<f64> = errs.iter().map(|e| mean_se(e).0).collect();
        let worst_end = errs[3].iter().copied().fold(0.0, f64::max);
        let shrinking = means.windows(2).all(|w| w[1] < w[0]);
        out.push(CheckOutcome::new(
            format!("baselines/consistent/{}/{}", cfg.method, cfg.scheme),
            shrinking && worst_end <= 1e-9,
            format!(
                "fractional error {} at t = {grid:?}; worst at t = N {worst_end:.1e}",
                means.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(" > ")
            ),
        ));
    }
    Ok(out)
}

/// Monitors Var[F̂_τ]/((N−τ)(N−τ+1)) across τ on a pool whose values and
/// predictions lie in [A, B]. Fails only if the ratio leaves the envelope
/// 2B³/A, which holds for every such pool.
pub fn check_variance_envelope(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let (a, b) = (1.0, 10.0);
    let params = PoolParams {
        lo: a,
        hi: b,
        ..PoolParams::default()
    };
    let pool = Arc::new(generate_pool(PoolKind::Uniform, 40, &params, seed)?);
    let n = pool.len();
    let noisy = NoisyPredictor::new(n, 1.0, 0.7, seed ^ 1)?.predict(&pool, &LabeledSet::new(n))?;
    let clamped: Vec<f64> = (0..n).map(|i| noisy.get(i).unwrap_or(a).clamp(a, b)).collect();
    let pred = crate::predictor::StaticPredictor(PredictionTable::dense(clamped)?);
    let runs = standard_runs(&pool, &pred, WeightScheme::Lure, n - 1, trials, seed ^ 0xE7)?;
    let mut ratios = Vec::with_capacity(n - 1);
    for tau in 1..n {
        let est: Vec<f64> = runs.iter().map(|r| r.estimates()[tau - 1]).collect();
        let (_, se) = mean_se(&est);
        let var = se * se * trials as f64;
        ratios.push(var / ((n - tau) * (n - tau + 1)) as f64);
    }
    let bound = 2.0 * b.powi(3) / a;
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CheckOutcome::new(
        "variance/envelope",
        ratios.iter().all(|r| r.is_finite()) && max <= bound,
        format!(
            "Var/((N-tau)(N-tau+1)) in [{min:.4}, {max:.4}] over tau = 1..{}, envelope {bound}",
            n - 1
        ),
    ))
}

/// Spread of Var̂_τ over suffix trajectories from one fixed D_τ: the
/// empirical variance must fall as t grows.
pub fn check_variance_decay(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let pool = standard_pool()?;
    let pred = standard_predictor(&pool)?;
    let truth = pool.true_values()?;
    let tau = 5;
    let grid = [10usize, 20, 30, 40];
    let config = RunConfig {
        plug_in: PlugInMean::Exact,
        ..RunConfig::with_scheme(WeightScheme::Lure)
    };
    let prefix = run_active_measurement(
        pool.clone(),
        &pred,
        config,
        tau,
        &mut trial_rng(seed, u64::MAX),
        LabeledSet::new(pool.len()),
    )?;
    let paths = (0..trials as u64)
        .into_par_iter()
        .map(|m| {
            let mut run = prefix.clone();
            let mut rng = trial_rng(seed ^ 0xDECA, m);
            let mut at = Vec::with_capacity(grid.len());
            for &t in &grid {
                while run.t() < t {
                    crate::estimator::advance(&mut run, &pred, &mut rng, &mut |i| Ok(truth[i]))?;
                }
                at.push(run.var_taus()[tau - 1]);
            }
            Ok(at)
        })
        .collect::<Result<Vec<_>>>()?;
    let spreads: Vec<f64> = (0..grid.len())
        .map(|k| {
            let xs: Vec<f64> = paths.iter().map(|p| p[k]).collect();
            let (_, se) = mean_se(&xs);
            se * se * trials as f64
        })
        .collect();
    Ok(CheckOutcome::new(
        format!("variance/decay/tau={tau}"),
        spreads.windows(2).all(|w| w[1] < w[0]),
        format!(
            "Var[Var_hat_tau] at t = {grid:?}: {}",
            spreads
                .iter()
                .map(|v| format!("{v:.4e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ))
}
