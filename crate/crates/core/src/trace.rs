//! Trace CSV and summary JSON files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::DecisionAction;
use crate::scenario::{BatchAggregate, FailureReason, RunSummary, ScenarioKind};
use crate::world::{Role, Task};

/// One vehicle at one step. Environment rows leave `decision` and
/// `position_error` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub id: u32,
    pub role: Role,
    pub task: Task,
    pub lane: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub vy: f64,
    pub decision: Option<DecisionAction>,
    pub position_error: Option<f64>,
}

pub const TRACE_COLUMNS: [&str; 12] = [
    "step",
    "time",
    "id",
    "role",
    "task",
    "lane",
    "x",
    "y",
    "v",
    "vy",
    "decision",
    "position_error",
];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("trace {0} has no rows")]
    EmptyTrace(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    if rows.is_empty() {
        w.write_record(TRACE_COLUMNS).map_err(csv_err(path))?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub success: bool,
    pub failure_reason: Option<FailureReason>,
    pub avg_speed: f64,
    #[serde(rename = "final_PE")]
    pub final_pe: f64,
}

impl SummaryJson {
    pub fn from_run(s: &RunSummary, scenario: ScenarioKind) -> Self {
        Self {
            scenario: s.scenario.unwrap_or(scenario),
            seed: s.seed,
            success: s.success,
            failure_reason: s.failure_reason,
            avg_speed: s.avg_convoy_speed,
            final_pe: s.final_pe,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| OutputError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `trace.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_run_outputs(dir: &Path, summary: &RunSummary, scenario: ScenarioKind) -> Result<(), OutputError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_trace_csv(&dir.join("trace.csv"), &summary.trace)?;
    write_json(&dir.join("summary.json"), &SummaryJson::from_run(summary, scenario))
}

/// `<out>/<scenario>/<seed>`
pub fn run_dir(out: &Path, scenario: ScenarioKind, seed: u64) -> PathBuf {
    out.join(scenario.as_str()).join(seed.to_string())
}

pub fn write_aggregate(out: &Path, aggregate: &BatchAggregate) -> Result<PathBuf, OutputError> {
    let dir = out.join(aggregate.scenario.as_str());
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("aggregate.json");
    write_json(&path, aggregate)?;
    write_entries_csv(&dir.join("aggregate.csv"), aggregate)?;
    Ok(path)
}

/// One row per seed: `seed,success,failure_reason,avg_speed,final_PE,error`.
fn write_entries_csv(path: &Path, aggregate: &BatchAggregate) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for e in &aggregate.entries {
        w.serialize(e).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Statistics recomputed from a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub steps: u64,
    pub sim_time: f64,
    pub convoy_vehicles: usize,
    pub environment_vehicles: usize,
    pub avg_speed: f64,
    #[serde(rename = "final_PE")]
    pub final_pe: f64,
    pub min_convoy_x: f64,
    pub decisions: BTreeMap<String, usize>,
}

pub fn replay_stats(rows: &[TraceRow]) -> Option<ReplayStats> {
    let last_step = rows.iter().map(|r| r.step).max()?;
    let convoy: Vec<&TraceRow> = rows.iter().filter(|r| r.role == Role::Convoy).collect();
    let mut ids: Vec<u32> = rows.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let convoy_vehicles = {
        let mut c: Vec<u32> = convoy.iter().map(|r| r.id).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    let final_rows: Vec<&&TraceRow> = convoy.iter().filter(|r| r.step == last_step).collect();
    let mut decisions = BTreeMap::new();
    for r in &convoy {
        if let Some(d) = r.decision {
            *decisions.entry(d.token().to_string()).or_insert(0) += 1;
        }
    }
    Some(ReplayStats {
        steps: last_step,
        sim_time: rows.iter().filter(|r| r.step == last_step).map(|r| r.time).next().unwrap_or(0.0),
        convoy_vehicles,
        environment_vehicles: ids.len() - convoy_vehicles,
        avg_speed: if convoy.is_empty() {
            0.0
        } else {
            convoy.iter().map(|r| r.v).sum::<f64>() / convoy.len() as f64
        },
        final_pe: final_rows
            .iter()
            .filter_map(|r| r.position_error)
            .fold(0.0, f64::max),
        min_convoy_x: final_rows.iter().map(|r| r.x).fold(f64::INFINITY, f64::min),
        decisions,
    })
}
