//! Active measurement: estimating a population total by importance sampling
//! without replacement, guided by predictions that improve as labels arrive.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checks;
pub mod error;
pub mod estimator;
pub mod pool;
pub mod predictor;
pub mod proposal;
pub mod sim;
pub mod variance;
pub mod weights;

pub use baselines::{Method, MethodConfig, TrialPoint};
pub use error::{Error, Result};
pub use estimator::{
    advance, combine, run_active_measurement, run_active_measurement_with, step_estimate, ExportRecord, PlugInMean,
    RunConfig, RunDiagnostics, RunState, StepRecord,
};
pub use pool::{load_pool, LabeledSet, PoolMode, Unit, UnitPool};
pub use predictor::Predictor;
pub use proposal::{build_proposal, ClampMode, ClampPolicy, PredictionTable, Proposal};
pub use sim::{run_trials, ExperimentConfig, Format, MetricsRow};
pub use variance::{confidence_interval, EstimateReport, ProposalHistory, VarianceAccumulator};
pub use weights::WeightScheme;
