//! The without-replacement importance-sampling estimator and the active
//! measurement loop.
//!
//! [`RunState`] is a state machine: push predictions, draw from the current
//! proposal, then `observe` the label. Simulation drivers answer labels from
//! ground truth; the session service answers them from a human.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{LabeledSet, UnitPool};
use crate::predictor::Predictor;
use crate::proposal::{ClampPolicy, PredictionTable, Proposal};
use crate::variance::{
    confidence_interval, var_combined, var_simple, EstimateReport, ProposalHistory, VarianceAccumulator,
};
use crate::weights::{
    comb_weights, inv_weights_or_fallback, lure_weight, lure_weights, normalize, sqrt_weights, InvOutcome, WeightScheme,
};

/// F̂ = F(D) + f(s)/q(s).
pub fn step_estimate(f_d: f64, f_s: f64, q_s: f64) -> Result<f64> {
    if !(q_s > 0.0) {
        return Err(Error::Domain(format!(
            "proposal probability must be positive, got {q_s}"
        )));
    }
    if !(f_s >= 0.0 && f_d >= 0.0) {
        return Err(Error::Domain(format!(
            "labels must be nonnegative, got f(s) = {f_s}, F(D) = {f_d}"
        )));
    }
    Ok(f_d + f_s / q_s)
}

/// Σ ᾱ_τ F̂_τ.
pub fn combine(estimates: &[f64], weights: &[f64]) -> Result<f64> {
    if estimates.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} estimates for {} weights",
            estimates.len(),
            weights.len()
        )));
    }
    let mass: f64 = weights.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("weights sum to {mass}, expected 1")));
    }
    Ok(estimates.iter().zip(weights).map(|(e, w)| e * w).sum())
}

/// Which mean centers the conditional-variance estimates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlugInMean {
    /// Ĝ_{τ,t} = F̂_{1:t−1} − F(D_τ) using the run's own weighting.
    #[default]
    Own,
    /// Same, but F̂_{1:t−1} is always the LURE-weighted combination.
    Lure,
    /// Ground truth F(Ω) − F(D_τ); simulation pools only.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: WeightScheme,
    pub clamp: ClampPolicy,
    pub level: f64,
    pub retrain_every: usize,
    #[serde(default)]
    pub plug_in: PlugInMean,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheme: WeightScheme::Comb,
            clamp: ClampPolicy::default(),
            level: 0.95,
            retrain_every: 1,
            plug_in: PlugInMean::Own,
        }
    }
}

impl RunConfig {
    pub fn with_scheme(scheme: WeightScheme) -> Self {
        RunConfig {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.retrain_every == 0 {
            return Err(Error::Config("retrain_every must be at least 1".into()));
        }
        if let WeightScheme::Inv { gamma } = self.scheme {
            WeightScheme::inv(gamma)?;
        }
        Ok(())
    }
}

/// One step of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tau: usize,
    #[serde(skip)]
    pub unit: usize,
    pub unit_id: String,
    pub f_value: f64,
    /// q_τ(s_τ)
    pub q: f64,
    /// F(D_τ), labeled mass before this step.
    pub f_d: f64,
    /// F̂_τ
    pub f_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepProposal {
    version: usize,
    normalizer: f64,
}

#[derive(Debug, Clone)]
struct CurrentProposal {
    proposal: Proposal,
    version: usize,
}

/// Counters of numerically degenerate events over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// Combined conditional variance came out negative and was floored.
    pub variance_floors: usize,
    pub inv_substitutions: usize,
    pub inv_comb_fallbacks: usize,
}

/// Full trajectory of one active-measurement run.
#[derive(Debug, Clone)]
pub struct RunState {
    pool: Arc<UnitPool>,
    config: RunConfig,
    labeled: LabeledSet,
    label_step: Vec<Option<usize>>,
    initial: usize,
    labeled_mass: f64,
    horizon: usize,
    // clamped prediction masses per table version, pool-aligned; NaN where
    // the table had no prediction
    tables: Vec<Arc<Vec<f64>>>,
    step_proposals: Vec<StepProposal>,
    current: Option<CurrentProposal>,
    steps: Vec<StepRecord>,
    estimates: Vec<f64>,
    combined: Vec<f64>,
    combined_lure: Vec<f64>,
    acc: VarianceAccumulator,
    reports: Vec<EstimateReport>,
    diagnostics: RunDiagnostics,
}

impl RunState {
    pub fn new(pool: Arc<UnitPool>, config: RunConfig, initial: LabeledSet) -> Result<Self> {
        config.validate()?;
        if config.plug_in == PlugInMean::Exact {
            pool.total_true()?;
        }
        let mut label_step = vec![None; pool.len()];
        for &(idx, value) in initial.entries() {
            if idx >= pool.len() {
                return Err(Error::UnknownUnit(format!("#{idx}")));
            }
            if let Some(truth) = pool.unit(idx).true_value {
                if truth != value {
                    return Err(Error::Label {
                        unit: pool.unit(idx).id.clone(),
                        value,
                    });
                }
            }
            label_step[idx] = Some(0);
        }
        let horizon = pool.len() - initial.len();
        let labeled_mass = initial.sum();
        Ok(RunState {
            config,
            initial: initial.len(),
            labeled: initial,
            label_step,
            labeled_mass,
            horizon,
            tables: Vec::new(),
            step_proposals: Vec::with_capacity(horizon),
            current: None,
            steps: Vec::with_capacity(horizon),
            estimates: Vec::with_capacity(horizon),
            combined: Vec::with_capacity(horizon),
            combined_lure: Vec::with_capacity(horizon),
            acc: VarianceAccumulator::with_capacity(horizon),
            reports: Vec::with_capacity(horizon),
            diagnostics: RunDiagnostics::default(),
            pool,
        })
    }

    pub fn pool(&self) -> &Arc<UnitPool> {
        &self.pool
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Completed steps.
    pub fn t(&self) -> usize {
        self.steps.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_len(&self) -> usize {
        self.initial
    }

    pub fn is_exhausted(&self) -> bool {
        self.steps.len() >= self.horizon
    }

    pub fn labeled(&self) -> &LabeledSet {
        &self.labeled
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    /// F̂_τ for τ = 1..t.
    pub fn estimates(&self) -> &[f64] {
        &self.estimates
    }

    /// F̂_{1:τ} for τ = 1..t.
    pub fn combined(&self) -> &[f64] {
        &self.combined
    }

    /// LURE-weighted F̂_{1:τ}, tracked for every scheme.
    pub fn combined_lure(&self) -> &[f64] {
        &self.combined_lure
    }

    pub fn reports(&self) -> &[EstimateReport] {
        &self.reports
    }

    pub fn diagnostics(&self) -> RunDiagnostics {
        self.diagnostics
    }

    /// Current per-τ conditional variance estimates Var̂_τ.
    pub fn var_taus(&self) -> &[f64] {
        self.acc.var_taus()
    }

    pub fn table_versions(&self) -> usize {
        self.tables.len()
    }

    /// Latest report.
    pub fn report(&self) -> Result<&EstimateReport> {
        self.reports.last().ok_or(Error::NoEstimate)
    }

    /// Installs predictions for the next proposal. Must cover every
    /// unlabeled unit.
    pub fn push_predictions(&mut self, table: &PredictionTable) -> Result<()> {
        if table.len() != self.pool.len() {
            return Err(Error::Shape(format!(
                "prediction table has {} entries, pool has {}",
                table.len(),
                self.pool.len()
            )));
        }
        let unlabeled = self.labeled.unlabeled(&self.pool);
        table.check_covers(&self.pool, &unlabeled)?;
        let clamp = self.config.clamp;
        let masses: Vec<f64> = table
            .values()
            .iter()
            .map(|g| g.map_or(f64::NAN, |g| clamp.apply(g)))
            .collect();
        let same = self
            .tables
            .last()
            .is_some_and(|last| last.iter().zip(&masses).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !same {
            self.tables.push(Arc::new(masses));
        }
        self.current = None;
        Ok(())
    }

    /// q_t over the unlabeled units, built on first use after a push or a label.
    pub fn proposal(&mut self) -> Result<&Proposal> {
        if self.is_exhausted() {
            return Err(Error::Exhausted(self.t()));
        }
        if self.current.is_none() {
            let version = self
                .tables
                .len()
                .checked_sub(1)
                .ok_or_else(|| Error::State("no predictions installed".into()))?;
            let masses_all = &self.tables[version];
            let support = self.labeled.unlabeled(&self.pool);
            let masses: Vec<f64> = support.iter().map(|&i| masses_all[i]).collect();
            let proposal = Proposal::from_masses(support, &masses)?;
            self.current = Some(CurrentProposal { proposal, version });
        }
        Ok(&self.current.as_ref().expect("built above").proposal)
    }

    /// Samples s_t ~ q_t.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(usize, f64)> {
        Ok(self.proposal()?.sample(rng))
    }

    /// Applies the label of `unit`, which must lie in the current proposal's
    /// support, and returns the updated report.
    pub fn observe(&mut self, unit: usize, value: f64) -> Result<&EstimateReport> {
        let q = self
            .proposal()?
            .prob(unit)
            .ok_or_else(|| Error::State(format!("unit #{unit} is not in the current proposal")))?;
        let unit_id = self.pool.unit(unit).id.clone();
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Label { unit: unit_id, value });
        }
        let current = self.current.take().expect("proposal built");
        let t = self.steps.len() + 1;
        let f_d = self.labeled_mass;
        let f_hat = step_estimate(f_d, value, q)?;

        self.labeled.insert(&self.pool, unit, value)?;
        self.label_step[unit] = Some(t);
        self.labeled_mass += value;
        self.step_proposals.push(StepProposal {
            version: current.version,
            normalizer: current.proposal.normalizer(),
        });
        self.steps.push(StepRecord {
            tau: t,
            unit,
            unit_id,
            f_value: value,
            q,
            f_d,
            f_hat,
        });
        self.estimates.push(f_hat);

        let report = if t == self.horizon {
            // the last unit has q = 1, so F̂_t is exact; weights that model
            // the shrinking space are infinite here
            self.combined.push(f_hat);
            self.combined_lure.push(f_hat);
            EstimateReport {
                t,
                estimate: f_hat,
                var_cond: 0.0,
                var_simp: 0.0,
                ci_lo: f_hat,
                ci_hi: f_hat,
                level: self.config.level,
                caveat: self.config.scheme.is_estimated(),
            }
        } else {
            self.update_estimates(t, value, q)?
        };
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    fn update_estimates(&mut self, t: usize, f: f64, q: f64) -> Result<EstimateReport> {
        let n = self.horizon;
        let f_hat = self.estimates[t - 1];
        let prev = match self.config.plug_in {
            PlugInMean::Own => Some(if t >= 2 { self.combined[t - 2] } else { f_hat }),
            PlugInMean::Lure => Some(if t >= 2 { self.combined_lure[t - 2] } else { f_hat }),
            PlugInMean::Exact => None,
        };
        let total = match prev {
            Some(p) => p,
            None => self.pool.total_true()?,
        };
        let beta = lure_weight(t, n)?;
        {
            let steps = &self.steps;
            let tables = &self.tables;
            let props = &self.step_proposals;
            let unit = steps[t - 1].unit;
            self.acc.streaming_update(
                t,
                f,
                q,
                beta,
                |tau| {
                    let p = props[tau - 1];
                    tables[p.version][unit] / p.normalizer
                },
                |tau| total - steps[tau - 1].f_d,
            )?;
        }
        let var_taus = self.acc.var_taus();

        let raw = match self.config.scheme {
            WeightScheme::Sqrt => sqrt_weights(t),
            WeightScheme::Lure => lure_weights(t, n)?,
            WeightScheme::Comb => comb_weights(t, n)?,
            WeightScheme::Inv { gamma } => {
                let (w, outcome) = inv_weights_or_fallback(var_taus, gamma, t, n)?;
                match outcome {
                    InvOutcome::Clean => {}
                    InvOutcome::Substituted => self.diagnostics.inv_substitutions += 1,
                    InvOutcome::CombFallback => self.diagnostics.inv_comb_fallbacks += 1,
                }
                w
            }
        };
        let weights = normalize(&raw)?;
        let estimate = combine(&self.estimates, &weights)?;
        let lure_norm = normalize(&lure_weights(t, n)?)?;
        self.combined.push(estimate);
        self.combined_lure.push(combine(&self.estimates, &lure_norm)?);

        let (var_cond, floored) = var_combined(&weights, var_taus)?;
        if floored {
            self.diagnostics.variance_floors += 1;
        }
        let var_simp = var_simple(&weights, &self.estimates, estimate)?;
        let (ci_lo, ci_hi) = confidence_interval(estimate, var_cond, self.config.level)?;
        Ok(EstimateReport {
            t,
            estimate,
            var_cond,
            var_simp,
            ci_lo,
            ci_hi,
            level: self.config.level,
            caveat: self.config.scheme.is_estimated(),
        })
    }

    /// Export rows, one per step.
    pub fn export_records(&self) -> Vec<ExportRecord> {
        self.steps
            .iter()
            .zip(&self.reports)
            .map(|(s, r)| ExportRecord {
                tau: s.tau,
                unit: s.unit_id.clone(),
                f: s.f_value,
                q: s.q,
                f_hat: s.f_hat,
                combined: r.estimate,
                var_cond: r.var_cond,
                var_simp: r.var_simp,
            })
            .collect()
    }
}

impl ProposalHistory for RunState {
    fn steps(&self) -> usize {
        self.steps.len()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn unit_at(&self, r: usize) -> usize {
        self.steps[r - 1].unit
    }

    fn f_at(&self, r: usize) -> f64 {
        self.steps[r - 1].f_value
    }

    fn q_at(&self, tau: usize, unit: usize) -> Option<f64> {
        let p = self.step_proposals.get(tau.checked_sub(1)?)?;
        match self.label_step.get(unit)? {
            Some(step) if *step < tau => None,
            _ => Some(self.tables[p.version][unit] / p.normalizer),
        }
    }

    fn partial_before(&self, tau: usize) -> f64 {
        self.steps[tau - 1].f_d
    }
}

/// One exported step: τ, unit, f, q_τ(s_τ), F̂_τ, F̂_{1:τ}, both variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub tau: usize,
    pub unit: String,
    pub f: f64,
    pub q: f64,
    pub f_hat: f64,
    pub combined: f64,
    pub var_cond: f64,
    pub var_simp: f64,
}

/// Runs `steps` steps, asking `labeler` for each sampled unit's value.
/// The predictor is consulted before step 1 and then every
/// `retrain_every` steps.
pub fn run_active_measurement_with<R, L>(
    pool: Arc<UnitPool>,
    predictor: &dyn Predictor,
    config: RunConfig,
    steps: usize,
    rng: &mut R,
    initial: LabeledSet,
    mut labeler: L,
) -> Result<RunState>
where
    R: Rng + ?Sized,
    L: FnMut(usize) -> Result<f64>,
{
    let mut run = RunState::new(pool, config, initial)?;
    if steps > run.horizon() {
        return Err(Error::Exhausted(run.horizon()));
    }
    for _ in 0..steps {
        advance(&mut run, predictor, rng, &mut labeler)?;
    }
    Ok(run)
}

/// Simulation mode: labels come from the pool's ground truth.
pub fn run_active_measurement<R: Rng + ?Sized>(
    pool: Arc<UnitPool>,
    predictor: &dyn Predictor,
    config: RunConfig,
    steps: usize,
    rng: &mut R,
    initial: LabeledSet,
) -> Result<RunState> {
    let truth = pool.true_values()?;
    run_active_measurement_with(pool, predictor, config, steps, rng, initial, |i| Ok(truth[i]))
}

/// One retrain-sample-label-update cycle.
pub fn advance<R, L>(run: &mut RunState, predictor: &dyn Predictor, rng: &mut R, labeler: &mut L) -> Result<()>
where
    R: Rng + ?Sized,
    L: FnMut(usize) -> Result<f64>,
{
    if run.is_exhausted() {
        return Err(Error::Exhausted(run.t()));
    }
    if run.t().is_multiple_of(run.config().retrain_every) || run.table_versions() == 0 {
        let table = predictor.predict(run.pool(), run.labeled())?;
        run.push_predictions(&table)?;
    }
    let (unit, _) = run.draw(rng)?;
    let value = labeler(unit)?;
    run.observe(unit, value)?;
    Ok(())
}
