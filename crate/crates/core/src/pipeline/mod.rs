//! Worker-level building blocks of the asynchronous pipeline: the dynamic
//! batching scheduler, episode state machine, staleness gate, policy
//! snapshots, and batch/round accounting.
//!
//! Everything here is a pure state machine or value type; the two engines
//! drive the same logic through queues they own.

pub mod batcher;
pub mod config;
pub mod env;
pub mod staleness;

pub use batcher::DynamicBatcher;
pub use config::{BatchTriggerConfig, PipelineConfig, RoundPlan, StreamerConfig};
pub use env::{EnvEpisode, EnvStepOutcome};
pub use staleness::StalenessGate;

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("episode already complete for env {0}")]
    StepAfterDone(usize),
    #[error("cannot publish version {attempted}: current is {current}")]
    VersionRegression { current: u64, attempted: u64 },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("inconsistent config: {0}")]
    InconsistentConfig(String),
}

/// One ready observation awaiting inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub env_id: usize,
    /// Index of the chunk this request asks actions for.
    pub chunk_index: u32,
    /// Context index in live mode; unused by the virtual engine.
    pub context: Option<usize>,
    /// Virtual time at which the env finished its step.
    pub enqueue_time_ms: f64,
}

/// One recorded environment step (live mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub policy_version: u64,
}

/// Episode payload: full records in live mode, just a step count in
/// virtual mode.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryRecords {
    Opaque { n_steps: u32 },
    Live(Vec<StepRecord>),
}

impl TrajectoryRecords {
    pub fn n_steps(&self) -> u32 {
        match self {
            TrajectoryRecords::Opaque { n_steps } => *n_steps,
            TrajectoryRecords::Live(records) => records.len() as u32,
        }
    }
}

/// One environment instance's completed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub env_id: usize,
    /// Version of the snapshot pinned at the first inference of the episode.
    pub policy_version: u64,
    /// Highest version used by any step; differs from `policy_version` only
    /// when mid-episode adoption is enabled.
    pub last_version: u64,
    pub n_steps: u32,
    pub created_at_ms: f64,
    pub records: TrajectoryRecords,
}

/// Immutable versioned policy weights.
///
/// `weights` is a row-major K x d matrix in live mode and empty in virtual
/// mode. Snapshots are never mutated after publication; sharing is by `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub version: u64,
    pub weights: Vec<f64>,
}

impl PolicySnapshot {
    pub fn initial(weights: Vec<f64>) -> Arc<Self> {
        Arc::new(PolicySnapshot { version: 0, weights })
    }
}

/// Tracks the published snapshot history and enforces that versions
/// increase strictly by one.
#[derive(Debug)]
pub struct SnapshotBoard {
    current: Arc<PolicySnapshot>,
}

impl SnapshotBoard {
    pub fn new(initial: Arc<PolicySnapshot>) -> Self {
        SnapshotBoard { current: initial }
    }

    pub fn current(&self) -> Arc<PolicySnapshot> {
        Arc::clone(&self.current)
    }

    pub fn version(&self) -> u64 {
        self.current.version
    }

    /// Publishes a new snapshot; rejects anything but `current + 1`.
    pub fn publish(&mut self, snapshot: PolicySnapshot) -> Result<Arc<PolicySnapshot>, PipelineError> {
        if snapshot.version != self.current.version + 1 {
            return Err(PipelineError::VersionRegression {
                current: self.current.version,
                attempted: snapshot.version,
            });
        }
        self.current = Arc::new(snapshot);
        Ok(Arc::clone(&self.current))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn publish_is_strictly_increasing() {
        let mut board = SnapshotBoard::new(PolicySnapshot::initial(vec![]));
        assert_eq!(board.version(), 0);
        board.publish(PolicySnapshot { version: 1, weights: vec![] }).unwrap();
        board.publish(PolicySnapshot { version: 2, weights: vec![] }).unwrap();
        assert_eq!(board.version(), 2);
        let err = board.publish(PolicySnapshot { version: 2, weights: vec![] });
        assert_eq!(
            err.unwrap_err(),
            PipelineError::VersionRegression { current: 2, attempted: 2 }
        );
        let err = board.publish(PolicySnapshot { version: 5, weights: vec![] });
        assert!(matches!(err, Err(PipelineError::VersionRegression { .. })));
    }
}
