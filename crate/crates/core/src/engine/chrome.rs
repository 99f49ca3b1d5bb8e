//! Trace export in the browser trace-viewer JSON array format (Chrome
//! `chrome://tracing`, Perfetto). Devices map to pids, worker lanes to tids,
//! phases to event names; timestamps are microseconds.

use super::{EngineError, Trace, TraceEvent, WorkerRef};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One complete ("X") trace-viewer event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChromeEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    /// Microseconds.
    pub ts: f64,
    /// Microseconds.
    pub dur: f64,
    pub pid: u32,
    pub tid: u32,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub args: serde_json::Map<String, serde_json::Value>,
}

/// Pid 0 hosts lanes with no device (CPU env stepping, queue waits);
/// device `d` maps to pid `d + 1`.
fn pid_of(event: &TraceEvent) -> u32 {
    event.device.map_or(0, |d| d + 1)
}

fn tid_of(worker: WorkerRef) -> u32 {
    match worker {
        WorkerRef::Rollout(i) => 1000 + i,
        WorkerRef::Actor(i) => 2000 + i,
        WorkerRef::Env(i) => 10_000 + i,
        WorkerRef::Device(i) => 3000 + i,
    }
}

pub fn to_chrome_events(trace: &Trace) -> Vec<ChromeEvent> {
    trace
        .events
        .iter()
        .map(|e| {
            let mut args = serde_json::Map::new();
            args.insert("worker".into(), serde_json::Value::String(e.worker.to_string()));
            if let Some(b) = e.meta.batch {
                args.insert("batch".into(), b.into());
            }
            if let Some(v) = e.meta.version {
                args.insert("version".into(), v.into());
            }
            if let Some(r) = e.meta.round {
                args.insert("round".into(), r.into());
            }
            if let Some(g) = e.meta.group {
                args.insert("group".into(), g.into());
            }
            if e.meta.blocked {
                args.insert("blocked".into(), true.into());
            }
            ChromeEvent {
                name: format!("{:?}", e.phase),
                cat: if e.phase.is_rollout_class() { "rollout" } else { "actor" }.into(),
                ph: "X".into(),
                ts: e.start_ms * 1000.0,
                dur: (e.end_ms - e.start_ms) * 1000.0,
                pid: pid_of(e),
                tid: tid_of(e.worker),
                args,
            }
        })
        .collect()
}

/// Writes the whole trace as a JSON array of complete events.
pub fn export_chrome_trace(trace: &Trace, path: &Path) -> Result<(), EngineError> {
    let events = to_chrome_events(trace);
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &events)
        .map_err(|e| EngineError::Parse(e.to_string()))?;
    Ok(())
}

/// Reads back an exported file into `(name, pid, tid, ts, dur)` intervals.
pub fn read_chrome_trace(path: &Path) -> Result<Vec<ChromeEvent>, EngineError> {
    let file = std::fs::File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| EngineError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EventMeta, Phase, RunDims, TraceStats};

    #[test]
    fn single_event_exports_in_microseconds() {
        let trace = Trace {
            config_fingerprint: "f".into(),
            seed: 0,
            dims: RunDims::default(),
            stats: TraceStats::default(),
            events: vec![TraceEvent {
                worker: WorkerRef::Rollout(0),
                device: Some(0),
                phase: Phase::Inference,
                start_ms: 1.5,
                end_ms: 43.5,
                meta: EventMeta { batch: Some(64), ..Default::default() },
            }],
        };
        let events = to_chrome_events(&trace);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].ts, 1500.0);
        assert_eq!(events[0].dur, 42_000.0);
        assert_eq!(events[0].pid, 1);
        assert_eq!(events[0].name, "Inference");
        assert_eq!(events[0].ph, "X");
    }

    #[test]
    fn export_round_trips_interval_set() {
        let trace = Trace {
            config_fingerprint: "f".into(),
            seed: 0,
            dims: RunDims::default(),
            stats: TraceStats::default(),
            events: (0..10)
                .map(|i| TraceEvent {
                    worker: WorkerRef::Env(i),
                    device: None,
                    phase: Phase::EnvStep,
                    start_ms: i as f64,
                    end_ms: i as f64 + 0.5,
                    meta: EventMeta::default(),
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        export_chrome_trace(&trace, &path).unwrap();
        let back = read_chrome_trace(&path).unwrap();
        let original = to_chrome_events(&trace);
        assert_eq!(back, original);
    }
}
