use std::sync::Arc;

use active_measure::predictor::{NoisyPredictor, OraclePredictor, StaticPredictor};
use active_measure::sim::{coverage, trial_rng};
use active_measure::weights::{comb_weights, lure_weight, lure_weights, normalize, sqrt_weights, worst_case_ratio};
use active_measure::{
    build_proposal, run_active_measurement, ClampPolicy, ExperimentConfig, LabeledSet, PredictionTable, Predictor,
    RunConfig, UnitPool, WeightScheme,
};
use proptest::prelude::*;

fn pool_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..50.0f64], 1..30)
}

fn scheme() -> impl Strategy<Value = WeightScheme> {
    prop_oneof![
        Just(WeightScheme::Sqrt),
        Just(WeightScheme::Lure),
        Just(WeightScheme::Comb),
        (0.05..1.0f64).prop_map(|gamma| WeightScheme::Inv { gamma }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partial_sum_grows_to_total(values in pool_values(), order_seed in any::<u64>()) {
        let pool = UnitPool::from_values(&values).unwrap();
        let mut order: Vec<usize> = (0..values.len()).collect();
        let mut s = order_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut d = LabeledSet::new(pool.len());
        let mut last = 0.0;
        for i in order {
            d.insert(&pool, i, values[i]).unwrap();
            let now = pool.partial_sum(&d);
            prop_assert!(now >= last);
            last = now;
        }
        let total = pool.total_true().unwrap();
        prop_assert!((last - total).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn oracle_proposal_is_f_over_remaining(values in prop::collection::vec(0.5..50.0f64, 2..30), k in 0usize..10) {
        let pool = UnitPool::from_values(&values).unwrap();
        let n = values.len();
        let unlabeled: Vec<usize> = (k.min(n - 1)..n).collect();
        let remaining: f64 = unlabeled.iter().map(|&i| values[i]).sum();
        let g = PredictionTable::dense(values.clone()).unwrap();
        let q = build_proposal(&pool, &g, &unlabeled, ClampPolicy::floor(0.1).unwrap()).unwrap();
        for &i in &unlabeled {
            prop_assert!((q.prob(i).unwrap() - values[i] / remaining).abs() <= 1e-12);
        }
    }

    #[test]
    fn proposal_positive_and_normalized(values in pool_values(), preds in prop::collection::vec(0.0..100.0f64, 30), floor in 1e-6..5.0f64) {
        let pool = UnitPool::from_values(&values).unwrap();
        let g = PredictionTable::dense(preds[..values.len()].to_vec()).unwrap();
        let all: Vec<usize> = (0..values.len()).collect();
        let q = build_proposal(&pool, &g, &all, ClampPolicy::floor(floor).unwrap()).unwrap();
        prop_assert!(q.probs().iter().all(|&p| p > 0.0));
        prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weight_schemes_normalize(n in 2usize..3000, frac in 0.0..1.0f64) {
        let t = 1 + ((n - 2) as f64 * frac) as usize;
        for w in [sqrt_weights(t), lure_weights(t, n).unwrap(), comb_weights(t, n).unwrap()] {
            prop_assert!(w.iter().all(|&x| x > 0.0 && x.is_finite()));
            let bar = normalize(&w).unwrap();
            prop_assert!((bar.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    /// Σ_{τ≤t} w_τ = 1/(n−t) − 1/n, since each w_τ = 1/(n−τ) − 1/(n−τ+1).
    #[test]
    fn lure_weights_telescope(n in 2usize..5000, frac in 0.0..1.0f64) {
        let t = 1 + ((n - 2) as f64 * frac) as usize;
        let sum: f64 = (1..=t).map(|tau| lure_weight(tau, n).unwrap()).sum();
        let closed = 1.0 / (n - t) as f64 - 1.0 / n as f64;
        prop_assert!((sum - closed).abs() <= 1e-12 * closed);
    }

    #[test]
    fn comb_within_nine_eighths(n in 2usize..2000, frac in 0.0..1.0f64) {
        let t = 1 + ((n - 2) as f64 * frac) as usize;
        let r = worst_case_ratio(&lure_weights(t, n).unwrap(), t).unwrap();
        prop_assert!((1.0 - 1e-12..=1.125 + 1e-9).contains(&r), "N = {n}, t = {t}: {r}");
    }

    #[test]
    fn reports_are_well_formed(
        values in prop::collection::vec(0.0..20.0f64, 2..25),
        s in scheme(),
        seed in any::<u64>(),
        level in 0.5..0.999f64,
    ) {
        let pool = Arc::new(UnitPool::from_values(&values).unwrap());
        let n = values.len();
        let pred = NoisyPredictor::new(n, 1.0, 0.5, seed).unwrap();
        let config = RunConfig { level, ..RunConfig::with_scheme(s) };
        let run = run_active_measurement(pool, &pred, config, n, &mut trial_rng(seed, 0), LabeledSet::new(n)).unwrap();
        for r in run.reports() {
            prop_assert!(r.var_cond >= 0.0 && r.var_simp >= 0.0);
            prop_assert!(r.ci_lo <= r.estimate && r.estimate <= r.ci_hi);
            prop_assert!(r.estimate >= 0.0);
        }
    }

    #[test]
    fn exhaustion_is_exact(
        values in prop::collection::vec(0.0..20.0f64, 1..25),
        preds in prop::collection::vec(0.0..20.0f64, 25),
        s in scheme(),
        seed in any::<u64>(),
    ) {
        let pool = Arc::new(UnitPool::from_values(&values).unwrap());
        let n = values.len();
        let total = pool.total_true().unwrap();
        let pred = StaticPredictor(PredictionTable::dense(preds[..n].to_vec()).unwrap());
        let run = run_active_measurement(pool, &pred, RunConfig::with_scheme(s), n, &mut trial_rng(seed, 1), LabeledSet::new(n)).unwrap();
        let last = run.report().unwrap();
        prop_assert!((last.estimate - total).abs() <= 1e-9 * total.max(1.0), "{} vs {total}", last.estimate);
    }

    #[test]
    fn oracle_predictions_are_exact_every_step(values in prop::collection::vec(0.5..20.0f64, 1..25), s in scheme(), seed in any::<u64>()) {
        let pool = Arc::new(UnitPool::from_values(&values).unwrap());
        let n = values.len();
        let total = pool.total_true().unwrap();
        let config = RunConfig { clamp: ClampPolicy::floor(1e-3).unwrap(), ..RunConfig::with_scheme(s) };
        let run = run_active_measurement(pool, &OraclePredictor, config, n, &mut trial_rng(seed, 2), LabeledSet::new(n)).unwrap();
        for e in run.estimates() {
            prop_assert!((e - total).abs() <= 1e-9 * total);
        }
    }

    #[test]
    fn same_seed_same_run(values in prop::collection::vec(0.0..20.0f64, 2..20), s in scheme(), seed in any::<u64>()) {
        let pool = Arc::new(UnitPool::from_values(&values).unwrap());
        let n = values.len();
        let pred = NoisyPredictor::new(n, 1.0, 0.5, seed).unwrap();
        let once = || run_active_measurement(pool.clone(), &pred, RunConfig::with_scheme(s), n - 1, &mut trial_rng(seed, 3), LabeledSet::new(n)).unwrap();
        prop_assert_eq!(once().export_records(), once().export_records());
    }

    #[test]
    fn config_roundtrips(trials in 1usize..100_000, seed in any::<u64>(), s in scheme(), level in 0.5..0.999f64) {
        let mut cfg = ExperimentConfig::parse("pool = uniform\n").unwrap();
        cfg.trials = trials;
        cfg.seed = seed;
        cfg.scheme = Some(s);
        cfg.set("level", &level.to_string()).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_kv()).unwrap();
        prop_assert_eq!(back.to_kv(), cfg.to_kv());
    }

    #[test]
    fn coverage_is_a_fraction(est in prop::collection::vec(-10.0..10.0f64, 1..50), var in 0.0..10.0f64, level in 0.01..0.999f64) {
        let vars = vec![var; est.len()];
        let c = coverage(&est, &vars, 0.5, level).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }
}

/// The predictor trait is object safe and every built-in predictor covers
/// the pool.
#[test]
fn predictors_cover_pool() {
    let pool = UnitPool::from_values(&[1.0, 2.0, 3.0]).unwrap();
    let d = LabeledSet::new(3);
    let preds: [&dyn Predictor; 2] = [&OraclePredictor, &NoisyPredictor::new(3, 1.0, 0.1, 9).unwrap()];
    for p in preds {
        let table = p.predict(&pool, &d).unwrap();
        assert!(table.check_covers(&pool, &[0, 1, 2]).is_ok());
    }
}
