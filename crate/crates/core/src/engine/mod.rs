//! Execution engines and trace recording.
//!
//! The virtual engine ([`virtual_engine::run_virtual`]) is a deterministic
//! single-threaded discrete-event simulator over virtual milliseconds. The
//! live engine ([`live::run_live`]) runs the same worker logic on real
//! threads with scaled sleeps. Both produce the same [`Trace`] schema.

pub mod chrome;
pub mod live;
pub mod monitor;
pub mod virtual_engine;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("deadlock: no runnable work; blocked: {blocked:?}")]
    Deadlock { blocked: Vec<String> },
    #[error("starvation timeout after {timeout_ms} virtual ms (worker: {worker})")]
    Starvation { worker: String, timeout_ms: f64 },
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Workload(#[from] crate::workload::WorkloadError),
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace parse: {0}")]
    Parse(String),
}

/// Pipeline phase an interval belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    EnvStep,
    Inference,
    TrainMicro,
    GradAggregate,
    WeightSync,
    QueueWait,
    Idle,
}

impl Phase {
    /// Phases that occupy a device.
    pub fn is_device_busy(self) -> bool {
        matches!(
            self,
            Phase::EnvStep | Phase::Inference | Phase::TrainMicro | Phase::GradAggregate | Phase::WeightSync
        )
    }

    /// Rollout-side vs actor-side classification for phase-time reports.
    pub fn is_rollout_class(self) -> bool {
        matches!(self, Phase::EnvStep | Phase::Inference)
    }

    pub fn is_actor_class(self) -> bool {
        matches!(self, Phase::TrainMicro | Phase::GradAggregate | Phase::WeightSync)
    }
}

/// Lane an interval is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum WorkerRef {
    Env(u32),
    Rollout(u32),
    Actor(u32),
    /// Synthetic lane for device idle intervals.
    Device(u32),
}

impl std::fmt::Display for WorkerRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WorkerRef::Env(i) => write!(f, "env/{i}"),
            WorkerRef::Rollout(i) => write!(f, "rollout/{i}"),
            WorkerRef::Actor(i) => write!(f, "actor/{i}"),
            WorkerRef::Device(i) => write!(f, "device/{i}"),
        }
    }
}

/// Small typed annotation set; serialized sparsely.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub batch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub version: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<u32>,
    /// Env instances covered by a grouped (GPU-batched) env step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub group: Option<u32>,
    /// Interval spent blocked on queue backpressure rather than transfer.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub blocked: bool,
}

/// One busy/wait interval; the ground truth for all metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub worker: WorkerRef,
    pub device: Option<u32>,
    pub phase: Phase,
    pub start_ms: f64,
    pub end_ms: f64,
    #[serde(default)]
    pub meta: EventMeta,
}

/// Fact recorded when a trajectory is consumed by an update round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumption {
    pub arrival_rank: usize,
    pub round: usize,
    pub consuming_version: u64,
    pub pinned_version: u64,
    pub env_id: usize,
}

/// Counters the invariant monitors cross-check against the event stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub produced_trajectories: usize,
    pub consumed_trajectories: usize,
    pub env_steps_total: u64,
    pub versions_published: u64,
    pub consumptions: Vec<Consumption>,
}

/// Run dimensions needed to interpret a trace without its config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDims {
    pub n_devices: u32,
    pub rollout_devices: Vec<u32>,
    pub actor_devices: Vec<u32>,
    pub n_env: usize,
    pub rollout_epochs: u32,
    pub episode_steps: u32,
}

/// Time-ordered interval record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config_fingerprint: String,
    pub seed: u64,
    pub dims: RunDims,
    pub stats: TraceStats,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// End of the last interval.
    pub fn makespan_ms(&self) -> f64 {
        self.events.iter().map(|e| e.end_ms).fold(0.0, f64::max)
    }

    /// Sorts events by start time (stable) and synthesizes per-device `Idle`
    /// intervals for the gaps between busy intervals.
    pub fn finalize(&mut self) {
        self.events.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
        let makespan = self.makespan_ms();
        let mut idle = Vec::new();
        for &device in self.dims.rollout_devices.iter().chain(&self.dims.actor_devices) {
            if idle.iter().any(|e: &TraceEvent| e.device == Some(device)) {
                continue; // colocated plans list devices twice
            }
            let mut busy: Vec<(f64, f64)> = self
                .events
                .iter()
                .filter(|e| e.device == Some(device) && e.phase.is_device_busy())
                .map(|e| (e.start_ms, e.end_ms))
                .collect();
            busy.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut cursor = 0.0;
            for (s, e) in busy {
                if s > cursor + 1e-9 {
                    idle.push(idle_event(device, cursor, s));
                }
                cursor = cursor.max(e);
            }
            if makespan > cursor + 1e-9 {
                idle.push(idle_event(device, cursor, makespan));
            }
        }
        self.events.extend(idle);
        self.events.sort_by(|a, b| a.start_ms.total_cmp(&b.start_ms));
    }

    /// SHA-256 over the serialized trace; identical traces hash identically.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("trace serializes"));
        hex_digest(hasher)
    }

    /// Writes the trace as one JSON header line followed by one event per
    /// line (append-friendly).
    pub fn write_jsonl(&self, path: &Path) -> Result<(), EngineError> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        let header = serde_json::json!({
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "dims": self.dims,
            "stats": self.stats,
        });
        writeln!(out, "{}", serde_json::to_string(&header).unwrap())?;
        for event in &self.events {
            writeln!(out, "{}", serde_json::to_string(event).unwrap())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Trace, EngineError> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| EngineError::Parse("empty trace file".into()))??;
        let header: serde_json::Value =
            serde_json::from_str(&header_line).map_err(|e| EngineError::Parse(e.to_string()))?;
        let mut trace = Trace {
            config_fingerprint: header["config_fingerprint"].as_str().unwrap_or("").to_string(),
            seed: header["seed"].as_u64().unwrap_or(0),
            dims: serde_json::from_value(header["dims"].clone())
                .map_err(|e| EngineError::Parse(e.to_string()))?,
            stats: serde_json::from_value(header["stats"].clone())
                .map_err(|e| EngineError::Parse(e.to_string()))?,
            events: Vec::new(),
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trace
                .events
                .push(serde_json::from_str(&line).map_err(|e| EngineError::Parse(e.to_string()))?);
        }
        Ok(trace)
    }
}

fn idle_event(device: u32, start_ms: f64, end_ms: f64) -> TraceEvent {
    TraceEvent {
        worker: WorkerRef::Device(device),
        device: Some(device),
        phase: Phase::Idle,
        start_ms,
        end_ms,
        meta: EventMeta::default(),
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable seed derivation for per-worker RNG streams (FNV-1a over the base
/// seed, a stream tag, and an index).
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in base.to_le_bytes() {
        eat(b);
    }
    for b in tag.bytes() {
        eat(b);
    }
    for b in index.to_le_bytes() {
        eat(b);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> Trace {
        Trace {
            config_fingerprint: "abc".into(),
            seed: 7,
            dims: RunDims {
                n_devices: 2,
                rollout_devices: vec![0],
                actor_devices: vec![1],
                n_env: 1,
                rollout_epochs: 1,
                episode_steps: 1,
            },
            stats: TraceStats::default(),
            events: vec![
                TraceEvent {
                    worker: WorkerRef::Rollout(0),
                    device: Some(0),
                    phase: Phase::Inference,
                    start_ms: 0.0,
                    end_ms: 42.0,
                    meta: EventMeta { batch: Some(64), ..Default::default() },
                },
                TraceEvent {
                    worker: WorkerRef::Actor(0),
                    device: Some(1),
                    phase: Phase::TrainMicro,
                    start_ms: 43.0,
                    end_ms: 50.0,
                    meta: EventMeta::default(),
                },
            ],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut trace = tiny_trace();
        trace.finalize();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        trace.write_jsonl(&path).unwrap();
        let back = Trace::read_jsonl(&path).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.hash(), trace.hash());
    }

    #[test]
    fn finalize_fills_idle_gaps() {
        let mut trace = tiny_trace();
        trace.finalize();
        // Device 0 idle after its inference until makespan; device 1 idle
        // before its first micro-step.
        let idles: Vec<&TraceEvent> =
            trace.events.iter().filter(|e| e.phase == Phase::Idle).collect();
        assert!(idles.iter().any(|e| e.device == Some(0) && e.start_ms == 42.0 && e.end_ms == 50.0));
        assert!(idles.iter().any(|e| e.device == Some(1) && e.start_ms == 0.0 && e.end_ms == 43.0));
    }

    #[test]
    fn derive_seed_is_stable_and_distinct() {
        assert_eq!(derive_seed(1, "env", 0), derive_seed(1, "env", 0));
        assert_ne!(derive_seed(1, "env", 0), derive_seed(1, "env", 1));
        assert_ne!(derive_seed(1, "env", 0), derive_seed(1, "worker", 0));
        assert_ne!(derive_seed(1, "env", 0), derive_seed(2, "env", 0));
    }
}
