//! Asynchronous RL post-training pipeline, runnable two ways: a
//! deterministic virtual-time discrete-event simulator and a live threaded
//! engine driving a small verifiable learner.
//!
//! The pipeline decouples environment stepping, batched policy inference,
//! and actor updates. Env workers feed a dynamic batching scheduler that
//! releases an inference batch when it is full or when the oldest request
//! has waited long enough; completed trajectories flow through a bounded
//! transmission queue to the actor, which trains in micro-batches and
//! publishes versioned policy snapshots back to the rollout side, subject
//! to a bounded-staleness gate.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod pipeline;
pub mod run;
pub mod toyrl;
pub mod workload;

pub use config::ExperimentConfig;
pub use engine::{Trace, TraceEvent};
pub use metrics::MetricsReport;
pub use pipeline::{PipelineConfig, Trajectory};
pub use workload::{LatencyModel, PlacementPlan, Strategy, WorkloadSpec};
