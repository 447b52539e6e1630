//! The finite unit domain, labels, and simulation ground truth.
//!
//! Pool files are newline-delimited records `id<TAB>payload_ref[<TAB>true_value]`.
//! Lines starting with `#` and blank lines are skipped. A pool is in simulation
//! mode when every record carries a true value and in live mode when none do.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labelable unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    /// Shown to the labeler, never interpreted here.
    pub payload_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Simulation,
    Live,
}

/// The finite domain of units. Immutable once built.
#[derive(Debug, Clone)]
pub struct UnitPool {
    units: Vec<Unit>,
    index: HashMap<String, usize>,
    mode: PoolMode,
}

impl UnitPool {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mode = if units[0].true_value.is_some() {
            PoolMode::Simulation
        } else {
            PoolMode::Live
        };
        let mut index = HashMap::with_capacity(units.len());
        for (i, unit) in units.iter().enumerate() {
            match (mode, unit.true_value) {
                (PoolMode::Simulation, Some(v)) if !(v.is_finite() && v >= 0.0) => {
                    return Err(Error::InvalidValue {
                        unit: unit.id.clone(),
                        value: v,
                    });
                }
                (PoolMode::Simulation, None) | (PoolMode::Live, Some(_)) => {
                    return Err(Error::MixedMode { line: i + 1 });
                }
                _ => {}
            }
            if index.insert(unit.id.clone(), i).is_some() {
                return Err(Error::Duplicate(unit.id.clone()));
            }
        }
        Ok(UnitPool { units, index, mode })
    }

    /// Simulation pool from raw values; ids are `u0`, `u1`, ...
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let units = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Unit {
                id: format!("u{i}"),
                payload_ref: format!("synthetic:{i}"),
                true_value: Some(v),
            })
            .collect();
        Self::new(units)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut units = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut mode: Option<PoolMode> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty unit id".into(),
                });
            }
            let true_value = match fields.get(2) {
                Some(v) => {
                    let value: f64 = v.trim().parse().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("invalid true value `{}`", v.trim()),
                    })?;
                    if !(value.is_finite() && value >= 0.0) {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("true value must be finite and nonnegative, got {value}"),
                        });
                    }
                    Some(value)
                }
                None => None,
            };
            let this_mode = if true_value.is_some() {
                PoolMode::Simulation
            } else {
                PoolMode::Live
            };
            match mode {
                None => mode = Some(this_mode),
                Some(m) if m != this_mode => return Err(Error::MixedMode { line: line_no }),
                _ => {}
            }
            if index.insert(id.to_string(), units.len()).is_some() {
                return Err(Error::Duplicate(id.to_string()));
            }
            units.push(Unit {
                id: id.to_string(),
                payload_ref: fields[1].to_string(),
                true_value,
            });
        }
        Self::new(units)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, idx: usize) -> &Unit {
        &self.units[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require_index(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Ground truth of unit `idx`, simulation mode only.
    pub fn true_value(&self, idx: usize) -> Result<f64> {
        self.units[idx].true_value.ok_or(Error::Unavailable)
    }

    pub fn true_values(&self) -> Result<Vec<f64>> {
        (0..self.len()).map(|i| self.true_value(i)).collect()
    }

    /// F(Ω): the quantity being estimated.
    pub fn total_true(&self) -> Result<f64> {
        if self.mode != PoolMode::Simulation {
            return Err(Error::Unavailable);
        }
        Ok(self.units.iter().filter_map(|u| u.true_value).sum())
    }

    /// F(D): the known mass of a labeled set.
    pub fn partial_sum(&self, labeled: &LabeledSet) -> f64 {
        labeled.sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for u in &self.units {
            out.push_str(&u.id);
            out.push('\t');
            out.push_str(&u.payload_ref);
            if let Some(v) = u.true_value {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Read a pool file.
pub fn load_pool(path: impl AsRef<Path>) -> Result<UnitPool> {
    let text = std::fs::read_to_string(path)?;
    UnitPool::parse(&text)
}

/// Labeled units in acquisition order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    entries: Vec<(usize, f64)>,
    members: Vec<bool>,
}

impl LabeledSet {
    pub fn new(pool_len: usize) -> Self {
        LabeledSet {
            entries: Vec::new(),
            members: vec![false; pool_len],
        }
    }

    /// Builds a labeled set from `(id, value)` pairs. In simulation mode the
    /// values must equal the ground truth.
    pub fn from_pairs<'a, I>(pool: &UnitPool, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut set = LabeledSet::new(pool.len());
        for (id, value) in pairs {
            let idx = pool.require_index(id)?;
            if let Some(truth) = pool.unit(idx).true_value {
                if truth != value {
                    return Err(Error::Label {
                        unit: id.to_string(),
                        value,
                    });
                }
            }
            set.insert(pool, idx, value)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, pool: &UnitPool, idx: usize, value: f64) -> Result<()> {
        if self.members.len() != pool.len() {
            self.members.resize(pool.len(), false);
        }
        let unit = pool
            .units
            .get(idx)
            .ok_or_else(|| Error::UnknownUnit(format!("#{idx}")))?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Label {
                unit: unit.id.clone(),
                value,
            });
        }
        if self.members[idx] {
            return Err(Error::Duplicate(unit.id.clone()));
        }
        self.members[idx] = true;
        self.entries.push((idx, value));
        Ok(())
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.members.get(idx).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v).sum()
    }

    /// Unlabeled unit indices, in pool order.
    pub fn unlabeled(&self, pool: &UnitPool) -> Vec<usize> {
        (0..pool.len()).filter(|&i| !self.contains(i)).collect()
    }
}
