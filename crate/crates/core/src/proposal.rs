//! Acquisition distributions built from predictor outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::UnitPool;

/// Predicted values g(s), aligned to pool order. Units without a prediction
/// hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    values: Vec<Option<f64>>,
}

impl PredictionTable {
    /// A table covering every unit of a pool.
    pub fn dense(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            check_prediction(&format!("#{i}"), v)?;
        }
        Ok(PredictionTable {
            values: values.into_iter().map(Some).collect(),
        })
    }

    pub fn from_pairs<'a, I>(pool: &UnitPool, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut values = vec![None; pool.len()];
        for (id, g) in pairs {
            let idx = pool.require_index(id)?;
            check_prediction(id, g)?;
            values[idx] = Some(g);
        }
        Ok(PredictionTable { values })
    }

    pub fn uniform(len: usize) -> Self {
        PredictionTable {
            values: vec![Some(1.0); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        self.values.get(idx).copied().flatten()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    /// Fails with a coverage error naming the first unit in `units` that
    /// has no prediction.
    pub fn check_covers(&self, pool: &UnitPool, units: &[usize]) -> Result<()> {
        match units.iter().find(|&&i| self.get(i).is_none()) {
            Some(&i) => Err(Error::Coverage(pool.unit(i).id.clone())),
            None => Ok(()),
        }
    }
}

fn check_prediction(id: &str, g: f64) -> Result<()> {
    if g.is_finite() && g >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidValue {
            unit: id.to_string(),
            value: g,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    /// g ← max(g, value)
    Floor,
    /// g ← g + value
    Offset,
}

/// Makes every unit sampleable by lifting predictions away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampPolicy {
    pub mode: ClampMode,
    pub value: f64,
}

impl ClampPolicy {
    pub fn floor(value: f64) -> Result<Self> {
        Self::new(ClampMode::Floor, value)
    }

    pub fn offset(value: f64) -> Result<Self> {
        Self::new(ClampMode::Offset, value)
    }

    pub fn new(mode: ClampMode, value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Domain(format!("clamp value must be positive, got {value}")));
        }
        Ok(ClampPolicy { mode, value })
    }

    #[inline]
    pub fn apply(&self, g: f64) -> f64 {
        match self.mode {
            ClampMode::Floor => g.max(self.value),
            ClampMode::Offset => g + self.value,
        }
    }
}

impl Default for ClampPolicy {
    fn default() -> Self {
        ClampPolicy {
            mode: ClampMode::Floor,
            value: 1.0,
        }
    }
}

/// A strictly positive distribution over a set of unlabeled units.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    support: Vec<usize>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl Proposal {
    /// Normalizes positive masses over `support`. The support must be sorted
    /// by unit index.
    pub fn from_masses(support: Vec<usize>, masses: &[f64]) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Domain("proposal support is empty".into()));
        }
        if support.len() != masses.len() {
            return Err(Error::Shape(format!(
                "{} units but {} masses",
                support.len(),
                masses.len()
            )));
        }
        if masses.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::Domain("proposal masses must be finite and positive".into()));
        }
        debug_assert!(support.windows(2).all(|w| w[0] < w[1]));
        let total: f64 = masses.iter().sum();
        let probs: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Proposal {
            support,
            probs,
            cumulative,
            total,
        })
    }

    /// Sum of the unnormalized masses; q(s) = mass(s) / total.
    pub fn normalizer(&self) -> f64 {
        self.total
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// q(s), or `None` when `unit` is outside the support.
    pub fn prob(&self, unit: usize) -> Option<f64> {
        self.support.binary_search(&unit).ok().map(|i| self.probs[i])
    }

    /// Draw one unit; returns it with its probability.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let total = *self.cumulative.last().expect("nonempty support");
        let u: f64 = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.support.len() - 1);
        (self.support[i], self.probs[i])
    }
}

/// q ∝ clamp(g) over the given unlabeled units.
pub fn build_proposal(
    pool: &UnitPool,
    preds: &PredictionTable,
    unlabeled: &[usize],
    clamp: ClampPolicy,
) -> Result<Proposal> {
    if unlabeled.is_empty() {
        return Err(Error::Domain("no unlabeled units".into()));
    }
    preds.check_covers(pool, unlabeled)?;
    let mut support = unlabeled.to_vec();
    support.sort_unstable();
    let masses: Vec<f64> = support
        .iter()
        .map(|&i| clamp.apply(preds.get(i).expect("coverage checked")))
        .collect();
    Proposal::from_masses(support, &masses)
}
