//! Pluggable predictors g(s) ≈ f(s) used to build proposals.
//!
//! All simulation predictors are deterministic functions of the labeled set:
//! any noise is drawn once per unit at construction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pool::{LabeledSet, UnitPool};
use crate::proposal::PredictionTable;

pub trait Predictor: Send + Sync {
    fn predict(&self, pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable>;
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict(&self, pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable> {
        (**self).predict(pool, labeled)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn predict(&self, pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable> {
        (**self).predict(pool, labeled)
    }
}

/// g = f.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        PredictionTable::dense(pool.true_values()?)
    }
}

/// Constant predictions; with any clamp this yields a uniform proposal.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPredictor;

impl Predictor for UniformPredictor {
    fn predict(&self, pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        Ok(PredictionTable::uniform(pool.len()))
    }
}

/// A fixed table, independent of the labeled set.
#[derive(Debug, Clone)]
pub struct StaticPredictor(pub PredictionTable);

impl Predictor for StaticPredictor {
    fn predict(&self, _pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        Ok(self.0.clone())
    }
}

fn frozen_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// g(s) = f(s)·bias·exp(σ·ε_s) with ε_s frozen per unit.
#[derive(Debug, Clone)]
pub struct NoisyPredictor {
    bias: f64,
    sigma: f64,
    noise: Vec<f64>,
}

impl NoisyPredictor {
    pub fn new(pool_len: usize, bias: f64, sigma: f64, seed: u64) -> Result<Self> {
        check_noise_params(bias, sigma)?;
        Ok(NoisyPredictor {
            bias,
            sigma,
            noise: frozen_noise(pool_len, seed),
        })
    }
}

fn check_noise_params(bias: f64, sigma: f64) -> Result<()> {
    if !(bias.is_finite() && bias > 0.0) {
        return Err(Error::Config(format!("bias must be positive, got {bias}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok(())
}

fn noisy_table(pool: &UnitPool, bias: f64, sigma: f64, noise: &[f64]) -> Result<PredictionTable> {
    if noise.len() != pool.len() {
        return Err(Error::Shape(format!(
            "predictor built for {} units, pool has {}",
            noise.len(),
            pool.len()
        )));
    }
    let values = pool
        .true_values()?
        .iter()
        .zip(noise)
        .map(|(&f, &e)| f * bias * (sigma * e).exp())
        .collect();
    PredictionTable::dense(values)
}

impl Predictor for NoisyPredictor {
    fn predict(&self, pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        noisy_table(pool, self.bias, self.sigma, &self.noise)
    }
}

/// Stand-in for fine-tuning: noise scale σ₀·(n+1)^(−y/2) shrinks with the
/// number of labels n, so the induced estimator variance decays like n^(−y).
#[derive(Debug, Clone)]
pub struct ImprovingPredictor {
    bias: f64,
    sigma0: f64,
    decay: f64,
    noise: Vec<f64>,
}

impl ImprovingPredictor {
    pub fn new(pool_len: usize, bias: f64, sigma0: f64, decay: f64, seed: u64) -> Result<Self> {
        check_noise_params(bias, sigma0)?;
        if !(decay.is_finite() && decay >= 0.0) {
            return Err(Error::Config(format!("decay must be nonnegative, got {decay}")));
        }
        Ok(ImprovingPredictor {
            bias,
            sigma0,
            decay,
            noise: frozen_noise(pool_len, seed),
        })
    }

    pub fn sigma_at(&self, labels: usize) -> f64 {
        self.sigma0 * ((labels + 1) as f64).powf(-self.decay / 2.0)
    }
}

impl Predictor for ImprovingPredictor {
    fn predict(&self, pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable> {
        noisy_table(pool, self.bias, self.sigma_at(labeled.len()), &self.noise)
    }
}

/// Step-thresholded tables: the table with the largest threshold not
/// exceeding the current label count is used.
#[derive(Debug, Clone)]
pub struct FixedCheckpointPredictor {
    checkpoints: BTreeMap<usize, PredictionTable>,
}

impl FixedCheckpointPredictor {
    pub fn new(checkpoints: BTreeMap<usize, PredictionTable>) -> Result<Self> {
        if checkpoints.is_empty() {
            return Err(Error::Config("no checkpoints".into()));
        }
        Ok(FixedCheckpointPredictor { checkpoints })
    }

    /// Parses `threshold<TAB>id<TAB>g` records.
    pub fn parse(pool: &UnitPool, text: &str) -> Result<Self> {
        let mut raw: BTreeMap<usize, Vec<Option<f64>>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
            }
            let threshold: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid threshold `{}`", fields[0])))?;
            let idx = pool
                .index_of(fields[1].trim())
                .ok_or_else(|| parse_err(format!("unknown unit `{}`", fields[1])))?;
            let g: f64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid prediction `{}`", fields[2])))?;
            if !(g.is_finite() && g >= 0.0) {
                return Err(parse_err(format!("prediction must be finite and nonnegative, got {g}")));
            }
            raw.entry(threshold).or_insert_with(|| vec![None; pool.len()])[idx] = Some(g);
        }
        let checkpoints = raw
            .into_iter()
            .map(|(k, vals)| {
                let pairs: Vec<(&str, f64)> = vals
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.map(|g| (pool.unit(i).id.as_str(), g)))
                    .collect();
                Ok((k, PredictionTable::from_pairs(pool, pairs)?))
            })
            .collect::<Result<_>>()?;
        Self::new(checkpoints)
    }

    pub fn load(pool: &UnitPool, path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(pool, &std::fs::read_to_string(path)?)
    }

    pub fn table_for(&self, labels: usize) -> Result<&PredictionTable> {
        self.checkpoints
            .range(..=labels)
            .next_back()
            .map(|(_, t)| t)
            .ok_or_else(|| Error::State(format!("no checkpoint at or below {labels} labels")))
    }
}

impl Predictor for FixedCheckpointPredictor {
    fn predict(&self, _pool: &UnitPool, labeled: &LabeledSet) -> Result<PredictionTable> {
        self.table_for(labeled.len()).cloned()
    }
}

/// The inner predictor's output on the empty labeled set, reused forever.
pub struct FrozenPredictor {
    table: PredictionTable,
}

impl FrozenPredictor {
    pub fn new(inner: &dyn Predictor, pool: &UnitPool) -> Result<Self> {
        Ok(FrozenPredictor {
            table: inner.predict(pool, &LabeledSet::new(pool.len()))?,
        })
    }

    pub fn table(&self) -> &PredictionTable {
        &self.table
    }
}

impl Predictor for FrozenPredictor {
    fn predict(&self, _pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        Ok(self.table.clone())
    }
}

/// Active-testing acquisition with the ground-truth loss |f − g|.
pub struct OracleLossPredictor {
    table: PredictionTable,
}

impl OracleLossPredictor {
    pub fn new(base: &PredictionTable, pool: &UnitPool) -> Result<Self> {
        let f = pool.true_values()?;
        let losses = f
            .iter()
            .enumerate()
            .map(|(i, &fv)| {
                base.get(i)
                    .map(|g| (fv - g).abs())
                    .ok_or_else(|| Error::Coverage(pool.unit(i).id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OracleLossPredictor {
            table: PredictionTable::dense(losses)?,
        })
    }
}

impl Predictor for OracleLossPredictor {
    fn predict(&self, _pool: &UnitPool, _labeled: &LabeledSet) -> Result<PredictionTable> {
        Ok(self.table.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool12() -> UnitPool {
        UnitPool::from_values(&[1.0, 2.0]).unwrap()
    }

    #[test]
    fn oracle_returns_truth() {
        let pool = UnitPool::from_values(&[0.0, 4.5, 2.0]).unwrap();
        let t = OraclePredictor.predict(&pool, &LabeledSet::new(3)).unwrap();
        assert_eq!(t.values(), &[Some(0.0), Some(4.5), Some(2.0)]);
    }

    #[test]
    fn oracle_needs_truth() {
        let live = UnitPool::parse("a\tx\n").unwrap();
        assert!(OraclePredictor.predict(&live, &LabeledSet::new(1)).is_err());
    }

    #[test]
    fn noiseless_bias_scales() {
        let pool = pool12();
        let p = NoisyPredictor::new(2, 1.2, 0.0, 9).unwrap();
        let t = p.predict(&pool, &LabeledSet::new(2)).unwrap();
        assert_eq!(t.values(), &[Some(1.2), Some(2.4)]);
    }

    #[test]
    fn noisy_predictor_is_frozen() {
        let pool = UnitPool::from_values(&[3.0; 10]).unwrap();
        let p = NoisyPredictor::new(10, 1.0, 0.5, 4).unwrap();
        let a = p.predict(&pool, &LabeledSet::new(10)).unwrap();
        let labeled = LabeledSet::from_pairs(&pool, [("u3", 3.0)]).unwrap();
        let b = p.predict(&pool, &labeled).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().any(|v| v.unwrap() != 3.0));
    }

    #[test]
    fn improving_predictor_shrinks_noise() {
        let p = ImprovingPredictor::new(4, 1.0, 2.0, 1.0, 1).unwrap();
        assert_eq!(p.sigma_at(0), 2.0);
        assert!((p.sigma_at(3) - 1.0).abs() < 1e-15);
        assert!(p.sigma_at(99) < p.sigma_at(3));
    }

    #[test]
    fn checkpoint_threshold_lookup() {
        let pool = pool12();
        let text = "0\tu0\t1\n0\tu1\t1\n10\tu0\t5\n10\tu1\t6\n";
        let p = FixedCheckpointPredictor::parse(&pool, text).unwrap();
        assert_eq!(p.table_for(7).unwrap().values(), &[Some(1.0), Some(1.0)]);
        assert_eq!(p.table_for(10).unwrap().values(), &[Some(5.0), Some(6.0)]);
        assert_eq!(p.table_for(400).unwrap().values(), &[Some(5.0), Some(6.0)]);
    }

    #[test]
    fn checkpoint_errors() {
        let pool = pool12();
        assert!(matches!(
            FixedCheckpointPredictor::parse(&pool, "0\tu0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            FixedCheckpointPredictor::parse(&pool, "0\tu0\t1\nx\tu1\t2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(FixedCheckpointPredictor::parse(&pool, "").is_err());
        let p = FixedCheckpointPredictor::parse(&pool, "5\tu0\t1\n").unwrap();
        assert!(p.table_for(4).is_err());
    }

    #[test]
    fn oracle_loss() {
        let pool = UnitPool::from_values(&[1.0, 5.0]).unwrap();
        let base = PredictionTable::dense(vec![1.0, 1.0]).unwrap();
        let p = OracleLossPredictor::new(&base, &pool).unwrap();
        let t = p.predict(&pool, &LabeledSet::new(2)).unwrap();
        assert_eq!(t.values(), &[Some(0.0), Some(4.0)]);
    }
}
