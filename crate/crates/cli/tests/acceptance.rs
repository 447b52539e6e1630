//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Runs under `cargo test`; the Monte Carlo criteria use the full trial
//! counts, so this target takes a few minutes.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use active_measure::checks::{self, CheckOutcome, CheckScale};
use active_measure::proposal::ClampPolicy;
use active_measure::{EstimateReport, WeightScheme};
use active_measure_service::{
    parse_log, replay, simulate_log, CreateParams, Next, SessionConfig, SessionStore, UnitSpec,
};

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&CheckScale) -> Result<Vec<CheckOutcome>, String>,
}

fn lift<T: Into<Vec<CheckOutcome>>>(r: active_measure::Result<T>) -> Result<Vec<CheckOutcome>, String> {
    r.map(Into::into).map_err(|e| e.to_string())
}

fn unbiasedness(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_unbiased(s.unbiased_trials, s.seed))
}

fn zero_covariance(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_zero_covariance(s.unbiased_trials, s.seed).map(|o| vec![o]))
}

fn oracle(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_oracle_exact(500, s.seed).map(|o| vec![o]))
}

fn exhaustion(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_exhaustion(s.seed).map(|o| vec![o]))
}

fn variance_unbiased(_: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_variance_unbiased().map(|o| vec![o]))
}

fn streaming(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    let mut out = lift(checks::check_streaming_equivalence(s.streaming_runs, s.seed).map(|o| vec![o]))?;
    out.extend(lift(checks::check_streaming_cost().map(|o| vec![o]))?);
    Ok(out)
}

fn bound(_: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_bound())
}

fn weighting(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_weighting(s.ordering_trials, s.seed))
}

fn coverage(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_coverage(s.coverage_trials, s.seed))
}

fn baselines(s: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    lift(checks::check_baselines(s.ordering_trials, s.seed))
}

fn same_bits(a: &EstimateReport, b: &EstimateReport) -> bool {
    a.t == b.t
        && a.caveat == b.caveat
        && [
            (a.estimate, b.estimate),
            (a.var_cond, b.var_cond),
            (a.var_simp, b.var_simp),
            (a.ci_lo, b.ci_lo),
            (a.ci_hi, b.ci_hi),
        ]
        .iter()
        .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Drives one live session, then checks its exported log against the
/// live trajectory and against the simulation driver.
fn record_replay_session(k: u64) -> Result<CheckOutcome, String> {
    let n = 4 + (k as usize * 7) % 37;
    let truth: Vec<f64> = (0..n)
        .map(|i| ((i as u64 * 2_654_435_761 + k * 97) % 23) as f64 / 3.0)
        .collect();
    let schemes = [
        WeightScheme::Comb,
        WeightScheme::Lure,
        WeightScheme::Sqrt,
        WeightScheme::Inv { gamma: 0.5 },
    ];
    let ids: Vec<String> = (0..n).map(|i| format!("tile-{i}")).collect();
    let table = |scale: f64| -> BTreeMap<String, f64> {
        ids.iter()
            .zip(&truth)
            .enumerate()
            .map(|(i, (id, v))| (id.clone(), (v + 1.0) * scale * (1.0 + 0.3 * ((i * 5) % 3) as f64)))
            .collect()
    };
    let store = SessionStore::in_memory();
    let id = store
        .create(&CreateParams {
            units: ids
                .iter()
                .map(|id| UnitSpec {
                    id: id.clone(),
                    payload_ref: format!("{id}.png"),
                })
                .collect(),
            config: SessionConfig {
                scheme: schemes[k as usize % schemes.len()],
                clamp: ClampPolicy::default(),
                level: 0.95,
                seed: k,
            },
            predictions: k.is_multiple_of(2).then(|| table(1.0)),
            uniform_fallback: true,
        })
        .map_err(|e| e.to_string())?;
    let steps = if k.is_multiple_of(3) { n } else { n * 2 / 3 };
    let mut live = Vec::new();
    for step in 0..steps {
        if step > 0 && step % 4 == 0 {
            store
                .push_predictions(&id, &table(1.0 + step as f64 / 10.0))
                .map_err(|e| e.to_string())?;
        }
        let Next::Pending(sample) = store.next(&id).map_err(|e| e.to_string())? else {
            return Err(format!("session {k} exhausted early"));
        };
        let i = ids.iter().position(|u| *u == sample.unit_id).expect("known unit");
        live.push(store.label(&id, &sample.unit_id, truth[i]).map_err(|e| e.to_string())?);
    }
    let events = parse_log(&store.export(&id).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let folded = replay(events.clone()).map_err(|e| e.to_string())?;
    let simulated = simulate_log(&events).map_err(|e| e.to_string())?;
    let agree = |xs: &[EstimateReport]| xs.len() == live.len() && xs.iter().zip(&live).all(|(a, b)| same_bits(a, b));
    Ok(CheckOutcome {
        name: format!("record_replay/session{k}"),
        passed: agree(&folded) && agree(&simulated),
        detail: format!("N = {n}, {steps} labels, {} events", events.len()),
    })
}

fn record_replay(_: &CheckScale) -> Result<Vec<CheckOutcome>, String> {
    (0..24).map(record_replay_session).collect()
}

fn main() -> ExitCode {
    let scale = CheckScale::default();
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria = [
        Criterion {
            name: "unbiasedness",
            budget: mins(2),
            run: unbiasedness,
        },
        Criterion {
            name: "zero_covariance",
            budget: None,
            run: zero_covariance,
        },
        Criterion {
            name: "zero_variance_oracle",
            budget: None,
            run: oracle,
        },
        Criterion {
            name: "exhaustion_exactness",
            budget: None,
            run: exhaustion,
        },
        Criterion {
            name: "variance_estimator_unbiasedness",
            budget: mins(1),
            run: variance_unbiased,
        },
        Criterion {
            name: "streaming_equivalence",
            budget: None,
            run: streaming,
        },
        Criterion {
            name: "nine_eighths_bound",
            budget: Some(Duration::from_secs(30)),
            run: bound,
        },
        Criterion {
            name: "weighting_ordering",
            budget: mins(15),
            run: weighting,
        },
        Criterion {
            name: "coverage",
            budget: mins(10),
            run: coverage,
        },
        Criterion {
            name: "baseline_ordering",
            budget: None,
            run: baselines,
        },
        Criterion {
            name: "record_replay",
            budget: None,
            run: record_replay,
        },
    ];
    let mut passed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)(&scale);
        let elapsed = start.elapsed();
        let (ok, detail) = match result {
            Err(e) => (false, format!("error: {e}")),
            Ok(outcomes) => {
                let failures: Vec<&CheckOutcome> = outcomes.iter().filter(|o| !o.passed).collect();
                let over = c.budget.is_some_and(|b| elapsed > b);
                let detail = match (failures.first(), over) {
                    (Some(f), _) => format!(
                        "{} of {} checks failed, first {}: {}",
                        failures.len(),
                        outcomes.len(),
                        f.name,
                        f.detail
                    ),
                    (None, true) => format!("over runtime budget {:?}", c.budget.unwrap()),
                    (None, false) => format!("{} checks", outcomes.len()),
                };
                (failures.is_empty() && !over, detail)
            }
        };
        passed += usize::from(ok);
        println!(
            "{} {}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {passed} of {} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
