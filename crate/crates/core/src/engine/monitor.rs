//! Post-hoc invariant monitors over traces. Independent of the engines'
//! internal bookkeeping: everything is recomputed from recorded facts.

use super::{Phase, Trace};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InvariantViolation {
    #[error("device {device}: busy intervals overlap at {at_ms} ms")]
    DeviceOverlap { device: u32, at_ms: f64 },
    #[error("trajectory conservation broken: produced {produced}, consumed {consumed}, expected {expected}")]
    Conservation { produced: usize, consumed: usize, expected: usize },
    #[error("staleness bound {bound} exceeded: rank {rank} pinned v{pinned} consumed at v{consuming}")]
    Staleness { rank: usize, pinned: u64, consuming: u64, bound: u64 },
    #[error("consumption order not FIFO at rank {rank}")]
    QueueOrder { rank: usize },
    #[error("env step count {actual} != expected {expected}")]
    EnvSteps { actual: u64, expected: u64 },
}

/// Busy intervals on one device must never overlap.
pub fn check_device_exclusivity(trace: &Trace) -> Result<(), InvariantViolation> {
    let mut devices: Vec<u32> = trace.events.iter().filter_map(|e| e.device).collect();
    devices.sort_unstable();
    devices.dedup();
    for device in devices {
        let mut intervals: Vec<(f64, f64)> = trace
            .events
            .iter()
            .filter(|e| e.device == Some(device) && e.phase.is_device_busy())
            .map(|e| (e.start_ms, e.end_ms))
            .collect();
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in intervals.windows(2) {
            if pair[1].0 < pair[0].1 - 1e-6 {
                return Err(InvariantViolation::DeviceOverlap { device, at_ms: pair[1].0 });
            }
        }
    }
    Ok(())
}

/// Every produced trajectory is consumed by exactly one update round.
pub fn check_conservation(trace: &Trace) -> Result<(), InvariantViolation> {
    let expected = trace.dims.n_env * trace.dims.rollout_epochs as usize;
    let produced = trace.stats.produced_trajectories;
    let consumed = trace.stats.consumed_trajectories;
    if produced != expected || consumed != expected || trace.stats.consumptions.len() != expected {
        return Err(InvariantViolation::Conservation { produced, consumed, expected });
    }
    Ok(())
}

/// Consumption happens in arrival order: ranks 0..n each appear exactly once,
/// in order, with non-decreasing round indices.
pub fn check_fifo_consumption(trace: &Trace) -> Result<(), InvariantViolation> {
    let mut last_round = 0usize;
    for (i, c) in trace.stats.consumptions.iter().enumerate() {
        if c.arrival_rank != i || c.round < last_round {
            return Err(InvariantViolation::QueueOrder { rank: i });
        }
        last_round = c.round;
    }
    Ok(())
}

/// Version gap at consumption must stay within the configured bound.
pub fn check_staleness(trace: &Trace, bound: u64) -> Result<(), InvariantViolation> {
    for c in &trace.stats.consumptions {
        if c.consuming_version > c.pinned_version + bound {
            return Err(InvariantViolation::Staleness {
                rank: c.arrival_rank,
                pinned: c.pinned_version,
                consuming: c.consuming_version,
                bound,
            });
        }
    }
    Ok(())
}

/// Recorded env-step totals must equal `epochs * envs * steps`.
pub fn check_env_step_count(trace: &Trace) -> Result<(), InvariantViolation> {
    let expected = trace.dims.rollout_epochs as u64
        * trace.dims.n_env as u64
        * trace.dims.episode_steps as u64;
    if trace.stats.env_steps_total != expected {
        return Err(InvariantViolation::EnvSteps {
            actual: trace.stats.env_steps_total,
            expected,
        });
    }
    Ok(())
}

/// Maximum observed consumption version gap.
pub fn max_staleness_gap(trace: &Trace) -> u64 {
    trace
        .stats
        .consumptions
        .iter()
        .map(|c| c.consuming_version.saturating_sub(c.pinned_version))
        .max()
        .unwrap_or(0)
}

/// All structural invariants at once (staleness checked only when a bound is
/// given; sync schedules legitimately exceed gap 1).
pub fn check_all(trace: &Trace, staleness_bound: Option<u64>) -> Result<(), InvariantViolation> {
    check_device_exclusivity(trace)?;
    check_conservation(trace)?;
    check_fifo_consumption(trace)?;
    check_env_step_count(trace)?;
    if let Some(bound) = staleness_bound {
        check_staleness(trace, bound)?;
    }
    Ok(())
}

/// Per-phase busy totals, split by rollout/actor class.
pub fn phase_totals(trace: &Trace) -> std::collections::BTreeMap<Phase, f64> {
    let mut totals = std::collections::BTreeMap::new();
    for e in &trace.events {
        if e.phase != Phase::Idle {
            *totals.entry(e.phase).or_insert(0.0) += e.end_ms - e.start_ms;
        }
    }
    totals
}
