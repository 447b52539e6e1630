//! Session event log: one JSON object per line, appended as operations are
//! accepted. A session's state is a fold over its events.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use active_measure::proposal::ClampPolicy;
use active_measure::weights::WeightScheme;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// A unit as submitted by the client: no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub id: String,
    #[serde(default)]
    pub payload_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub scheme: WeightScheme,
    pub clamp: ClampPolicy,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        at: u64,
        config: SessionConfig,
        units: Vec<UnitSpec>,
        predictions: BTreeMap<String, f64>,
    },
    Sampled {
        at: u64,
        unit_id: String,
        q: f64,
    },
    Labeled {
        at: u64,
        unit_id: String,
        value: f64,
    },
    PredictionsPushed {
        at: u64,
        predictions: BTreeMap<String, f64>,
    },
}

impl Event {
    pub fn at(&self) -> u64 {
        match self {
            Event::Created { at, .. }
            | Event::Sampled { at, .. }
            | Event::Labeled { at, .. }
            | Event::PredictionsPushed { at, .. } => *at,
        }
    }
}

/// Parses a JSON-lines event log. Blank lines are skipped.
pub fn parse_log(text: &str) -> ServiceResult<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(line).map_err(|e| ServiceError::Log {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn read_log(path: impl AsRef<Path>) -> ServiceResult<Vec<Event>> {
    let file = fs::File::open(path)?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| ServiceError::Log {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(events)
}

pub fn render_log(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

/// Appends one event and syncs it to disk.
pub fn append_event(path: impl AsRef<Path>, event: &Event) -> ServiceResult<()> {
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(event)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}
