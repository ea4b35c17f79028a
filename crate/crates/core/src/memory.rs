//! Task-partitioned experience pool with cosine top-k retrieval and JSON-lines
//! persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{PoisonError, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::DecisionAction;
use crate::scalar::Scalar;
use crate::world::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AvoidObstacles,
    JoinConvoy,
    LeaveConvoy,
    EscortSwitch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::AvoidObstacles,
        TaskKind::JoinConvoy,
        TaskKind::LeaveConvoy,
        TaskKind::EscortSwitch,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::AvoidObstacles => "avoid_obstacles",
            TaskKind::JoinConvoy => "join_convoy",
            TaskKind::LeaveConvoy => "leave_convoy",
            TaskKind::EscortSwitch => "escort_switch",
        }
    }
}

impl From<Task> for TaskKind {
    /// Untasked and protected vehicles drive normally, which is filed under
    /// obstacle avoidance.
    fn from(task: Task) -> Self {
        match task {
            Task::JoinConvoy => TaskKind::JoinConvoy,
            Task::LeaveConvoy => TaskKind::LeaveConvoy,
            Task::EscortSwitch => TaskKind::EscortSwitch,
            Task::None | Task::AvoidObstacles | Task::Protected => TaskKind::AvoidObstacles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub task: TaskKind,
    pub features: Vec<f64>,
    pub scene_text: String,
    pub decision: DecisionAction,
    pub outcome: Outcome,
    pub run_seed: u64,
    pub step: u64,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("I/O error on experience file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed experience on line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("could not encode experience: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperiencePool {
    areas: [Vec<Experience>; 4],
}

impl ExperiencePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, e: Experience) {
        self.areas[e.task.index()].push(e);
    }

    pub fn area(&self, task: TaskKind) -> &[Experience] {
        &self.areas[task.index()]
    }

    pub fn len(&self) -> usize {
        self.areas.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records, area by area, each area in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.areas.iter().flatten()
    }

    /// Up to `k` successful experiences of `task`, most similar first; equal
    /// similarity prefers the later insertion.
    pub fn retrieve_similar(&self, task: TaskKind, query: &[f64], k: usize) -> Vec<&Experience> {
        let mut scored: Vec<(f64, usize, &Experience)> = self
            .area(task)
            .iter()
            .enumerate()
            .filter(|(_, e)| e.outcome == Outcome::Success)
            .map(|(i, e)| (cosine_similarity(query, &e.features), i, e))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        scored.into_iter().take(k).map(|(_, _, e)| e).collect()
    }

    pub fn persist(&self, path: &Path) -> Result<(), MemoryError> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in self.iter() {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let reader = BufReader::new(File::open(path)?);
        let mut pool = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Experience =
                serde_json::from_str(&line).map_err(|err| MemoryError::MalformedLine {
                    line: i + 1,
                    message: err.to_string(),
                })?;
            pool.store(e);
        }
        Ok(pool)
    }
}

/// Pool shared between concurrent runs: retrievals take a read lock, appends
/// a write lock, so a reader never observes a half-written record.
#[derive(Debug, Default)]
pub struct SharedExperiencePool {
    inner: RwLock<ExperiencePool>,
}

impl SharedExperiencePool {
    pub fn new(pool: ExperiencePool) -> Self {
        Self {
            inner: RwLock::new(pool),
        }
    }

    pub fn retrieve_similar(&self, task: TaskKind, query: &[f64], k: usize) -> Vec<Experience> {
        let guard = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        guard
            .retrieve_similar(task, query, k)
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn store_all(&self, experiences: impl IntoIterator<Item = Experience>) {
        let mut guard = self.inner.write().unwrap_or_else(PoisonError::into_inner);
        for e in experiences {
            guard.store(e);
        }
    }

    pub fn snapshot(&self) -> ExperiencePool {
        self.inner
            .read()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    pub fn into_inner(self) -> ExperiencePool {
        self.inner.into_inner().unwrap_or_else(PoisonError::into_inner)
    }
}
