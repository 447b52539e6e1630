//! One live measurement run driven by a human labeler.
//!
//! Every mutation is first prepared as an [`Event`] without touching state,
//! then applied through [`Session::apply`], the same fold used when a
//! session is restored from its log. Persisting between the two steps keeps
//! disk and memory in agreement.

use std::collections::BTreeMap;
use std::sync::Arc;

use active_measure::estimator::{run_active_measurement_with, RunConfig, RunState};
use active_measure::pool::{LabeledSet, Unit, UnitPool};
use active_measure::predictor::FixedCheckpointPredictor;
use active_measure::proposal::PredictionTable;
use active_measure::variance::EstimateReport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::events::{Event, SessionConfig, UnitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// No sample drawn yet.
    Created,
    /// A sample awaits its label.
    Pending,
    /// Between steps.
    Idle,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingSample {
    pub unit_id: String,
    pub payload_ref: String,
    pub q: f64,
    /// Step the label will complete.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub status: Status,
    pub t: usize,
    pub horizon: usize,
    pub scheme: String,
    pub created_at: u64,
    pub updated_at: u64,
}

/// Inputs of a new session.
#[derive(Debug, Clone, PartialEq)]
pub struct CreateParams {
    pub units: Vec<UnitSpec>,
    pub config: SessionConfig,
    pub predictions: Option<BTreeMap<String, f64>>,
    /// With no predictions given, start from a uniform proposal.
    pub uniform_fallback: bool,
}

pub struct Session {
    id: String,
    config: SessionConfig,
    run: RunState,
    rng: ChaCha8Rng,
    pending: Option<(usize, PendingSample)>,
    events: Vec<Event>,
    created_at: u64,
    updated_at: u64,
}

fn run_config(config: &SessionConfig) -> RunConfig {
    RunConfig {
        scheme: config.scheme,
        clamp: config.clamp,
        level: config.level,
        ..RunConfig::default()
    }
}

fn live_pool(units: &[UnitSpec]) -> ServiceResult<UnitPool> {
    let units = units
        .iter()
        .map(|u| Unit {
            id: u.id.clone(),
            payload_ref: u.payload_ref.clone(),
            true_value: None,
        })
        .collect();
    Ok(UnitPool::new(units)?)
}

fn table_from_map(pool: &UnitPool, map: &BTreeMap<String, f64>) -> ServiceResult<PredictionTable> {
    Ok(PredictionTable::from_pairs(
        pool,
        map.iter().map(|(k, v)| (k.as_str(), *v)),
    )?)
}

impl Session {
    /// Validates the inputs and returns the opening event.
    pub fn prepare_create(id: &str, params: &CreateParams, now: u64) -> ServiceResult<Event> {
        let pool = live_pool(&params.units)?;
        run_config(&params.config).validate()?;
        let predictions = match &params.predictions {
            Some(map) => map.clone(),
            None if params.uniform_fallback => params.units.iter().map(|u| (u.id.clone(), 1.0)).collect(),
            None => {
                let first = &params.units[0].id;
                return Err(active_measure::Error::Coverage(first.clone()).into());
            }
        };
        let table = table_from_map(&pool, &predictions)?;
        let all: Vec<usize> = (0..pool.len()).collect();
        table.check_covers(&pool, &all)?;
        Ok(Event::Created {
            id: id.to_string(),
            at: now,
            config: params.config,
            units: params.units.clone(),
            predictions,
        })
    }

    /// Builds a session from its opening event.
    pub fn from_created(event: Event) -> ServiceResult<Session> {
        let Event::Created {
            id,
            at,
            config,
            units,
            predictions,
        } = &event
        else {
            return Err(ServiceError::Replay {
                index: 0,
                message: "first event must be `created`".into(),
            });
        };
        let pool = Arc::new(live_pool(units)?);
        let table = table_from_map(&pool, predictions)?;
        let mut run = RunState::new(pool.clone(), run_config(config), LabeledSet::new(pool.len()))?;
        run.push_predictions(&table)?;
        Ok(Session {
            id: id.clone(),
            config: *config,
            run,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pending: None,
            created_at: *at,
            updated_at: *at,
            events: vec![event],
        })
    }

    /// Folds a full event log. `None` for an empty log.
    pub fn from_events(events: Vec<Event>) -> ServiceResult<Option<Session>> {
        let mut it = events.into_iter();
        let Some(first) = it.next() else {
            return Ok(None);
        };
        let mut session = Session::from_created(first)?;
        for (i, event) in it.enumerate() {
            session.apply(event).map_err(|e| match e {
                ServiceError::Replay { message, .. } => ServiceError::Replay { index: i + 1, message },
                other => ServiceError::Replay {
                    index: i + 1,
                    message: other.to_string(),
                },
            })?;
        }
        Ok(Some(session))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn run(&self) -> &RunState {
        &self.run
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn trajectory(&self) -> &[EstimateReport] {
        self.run.reports()
    }

    pub fn pending(&self) -> Option<&PendingSample> {
        self.pending.as_ref().map(|(_, p)| p)
    }

    pub fn status(&self) -> Status {
        if self.pending.is_some() {
            Status::Pending
        } else if self.run.is_exhausted() {
            Status::Exhausted
        } else if self.run.t() == 0 {
            Status::Created
        } else {
            Status::Idle
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            status: self.status(),
            t: self.run.t(),
            horizon: self.run.horizon(),
            scheme: self.config.scheme.name(),
            created_at: self.created_at,
            updated_at: self.updated_at,
        }
    }

    /// The event that draws the next sample, or `None` when one is already
    /// pending.
    pub fn prepare_next(&mut self, now: u64) -> ServiceResult<Option<Event>> {
        if self.pending.is_some() {
            return Ok(None);
        }
        if self.run.is_exhausted() {
            return Err(ServiceError::Exhausted);
        }
        let mut rng = self.rng.clone();
        let (unit, q) = self.run.proposal()?.sample(&mut rng);
        Ok(Some(Event::Sampled {
            at: now,
            unit_id: self.run.pool().unit(unit).id.clone(),
            q,
        }))
    }

    pub fn prepare_label(&self, unit_id: &str, value: f64, now: u64) -> ServiceResult<Event> {
        let Some((_, pending)) = &self.pending else {
            return Err(ServiceError::Conflict("no sample is pending".into()));
        };
        if pending.unit_id != unit_id {
            return Err(ServiceError::Conflict(format!(
                "label for `{unit_id}` but `{}` is pending",
                pending.unit_id
            )));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(ServiceError::Validation(format!(
                "label must be a finite nonnegative number, got {value}"
            )));
        }
        Ok(Event::Labeled {
            at: now,
            unit_id: unit_id.to_string(),
            value,
        })
    }

    pub fn prepare_push(&self, predictions: &BTreeMap<String, f64>, now: u64) -> ServiceResult<Event> {
        if self.pending.is_some() {
            return Err(ServiceError::Conflict(
                "predictions cannot change while a sample is pending".into(),
            ));
        }
        let pool = self.run.pool();
        let table = table_from_map(pool, predictions)?;
        table.check_covers(pool, &self.run.labeled().unlabeled(pool))?;
        Ok(Event::PredictionsPushed {
            at: now,
            predictions: predictions.clone(),
        })
    }

    /// Applies one event after the opening one.
    pub fn apply(&mut self, event: Event) -> ServiceResult<()> {
        let replay = |message: String| ServiceError::Replay { index: 0, message };
        match &event {
            Event::Created { .. } => return Err(replay("duplicate `created` event".into())),
            Event::Sampled { unit_id, q, .. } => {
                if self.pending.is_some() {
                    return Err(replay("sample drawn while another is pending".into()));
                }
                let (unit, p) = self.run.draw(&mut self.rng)?;
                let unit_ref = self.run.pool().unit(unit);
                if unit_ref.id != *unit_id || p.to_bits() != q.to_bits() {
                    return Err(replay(format!(
                        "logged sample `{unit_id}` (q = {q}) but the seeded stream draws `{}` (q = {p})",
                        unit_ref.id
                    )));
                }
                self.pending = Some((
                    unit,
                    PendingSample {
                        unit_id: unit_id.clone(),
                        payload_ref: unit_ref.payload_ref.clone(),
                        q: p,
                        t: self.run.t() + 1,
                    },
                ));
            }
            Event::Labeled { unit_id, value, .. } => {
                let Some((unit, pending)) = &self.pending else {
                    return Err(replay("label without a pending sample".into()));
                };
                if pending.unit_id != *unit_id {
                    return Err(replay(format!(
                        "label for `{unit_id}` but `{}` is pending",
                        pending.unit_id
                    )));
                }
                let unit = *unit;
                self.run.observe(unit, *value)?;
                self.pending = None;
            }
            Event::PredictionsPushed { predictions, .. } => {
                if self.pending.is_some() {
                    return Err(replay("predictions pushed while a sample is pending".into()));
                }
                let table = table_from_map(self.run.pool(), predictions)?;
                self.run.push_predictions(&table)?;
            }
        }
        self.updated_at = event.at();
        self.events.push(event);
        Ok(())
    }
}

/// Reports reproduced by folding an event log; empty for an empty log.
pub fn replay(events: Vec<Event>) -> ServiceResult<Vec<EstimateReport>> {
    Ok(Session::from_events(events)?
        .map(|s| s.trajectory().to_vec())
        .unwrap_or_default())
}

/// Re-runs a logged session through the simulation driver: the labels
/// become ground truth, prediction pushes become checkpoints keyed by the
/// label count at which they arrived, and the seed is reused.
pub fn simulate_log(events: &[Event]) -> ServiceResult<Vec<EstimateReport>> {
    let Some(Event::Created {
        config,
        units,
        predictions,
        ..
    }) = events.first()
    else {
        return Ok(Vec::new());
    };
    let mut labels: BTreeMap<&str, f64> = BTreeMap::new();
    let mut pushes: Vec<(usize, &BTreeMap<String, f64>)> = vec![(0, predictions)];
    for e in &events[1..] {
        match e {
            Event::Labeled { unit_id, value, .. } => {
                labels.insert(unit_id, *value);
            }
            Event::PredictionsPushed { predictions, .. } => pushes.push((labels.len(), predictions)),
            _ => {}
        }
    }
    let live = live_pool(units)?;
    let sim_units = live
        .units()
        .iter()
        .map(|u| Unit {
            true_value: Some(labels.get(u.id.as_str()).copied().unwrap_or(0.0)),
            ..u.clone()
        })
        .collect();
    let pool = Arc::new(UnitPool::new(sim_units)?);
    let mut checkpoints = BTreeMap::new();
    for (k, map) in pushes {
        checkpoints.insert(k, table_from_map(&pool, map)?);
    }
    let predictor = FixedCheckpointPredictor::new(checkpoints)?;
    let truth = pool.true_values()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let run = run_active_measurement_with(
        pool.clone(),
        &predictor,
        run_config(config),
        labels.len(),
        &mut rng,
        LabeledSet::new(pool.len()),
        |i| Ok(truth[i]),
    )?;
    Ok(run.reports().to_vec())
}
