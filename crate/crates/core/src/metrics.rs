//! Throughput, utilization, speedup, ratio-balance, and scaling reports
//! computed from traces.

use crate::engine::{Phase, Trace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("total time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("scaling report needs at least two scales")]
    TooFewScales,
    #[error("ratio report needs at least two ratios")]
    TooFewRatios,
}

/// Summary of one completed run. `rollout_s`/`actor_s` are wall-clock unions
/// of the respective phase classes (they overlap under async execution and
/// sum to the total only for strictly alternating schedules).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub n_devices: u32,
    pub ratio: String,
    pub throughput: f64,
    pub total_s: f64,
    pub rollout_s: f64,
    pub actor_s: f64,
    pub per_device_utilization: BTreeMap<u32, f64>,
    pub env_steps_total: u64,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Environment state computations per second:
/// `epochs * envs * steps / total_time`.
pub fn compute_throughput(
    rollout_epochs: u64,
    n_env: u64,
    episode_steps: u64,
    total_time_s: f64,
) -> Result<f64, MetricsError> {
    if !(total_time_s > 0.0) {
        return Err(MetricsError::NonPositiveTime(total_time_s));
    }
    Ok((rollout_epochs * n_env * episode_steps) as f64 / total_time_s)
}

/// Percent change of `variant` against `baseline`.
pub fn speedup_percent(baseline: f64, variant: f64) -> f64 {
    100.0 * (variant - baseline) / baseline
}

/// Busy fraction of one device over the whole run.
pub fn utilization(trace: &Trace, device: u32) -> f64 {
    let makespan = trace.makespan_ms();
    if makespan <= 0.0 {
        return 0.0;
    }
    let busy: f64 = trace
        .events
        .iter()
        .filter(|e| e.device == Some(device) && e.phase.is_device_busy())
        .map(|e| e.end_ms - e.start_ms)
        .sum();
    busy / makespan
}

/// Total length of the union of a set of intervals.
fn union_length(mut intervals: Vec<(f64, f64)>) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cursor = f64::NEG_INFINITY;
    for (s, e) in intervals {
        let s = s.max(cursor);
        if e > s {
            total += e - s;
            cursor = e;
        }
    }
    total
}

fn class_union_ms(trace: &Trace, rollout: bool) -> f64 {
    union_length(
        trace
            .events
            .iter()
            .filter(|e| {
                e.phase != Phase::Idle
                    && e.phase != Phase::QueueWait
                    && (if rollout { e.phase.is_rollout_class() } else { e.phase.is_actor_class() })
            })
            .map(|e| (e.start_ms, e.end_ms))
            .collect(),
    )
}

/// Wall time during which any rollout-side phase is active.
pub fn rollout_time_s(trace: &Trace) -> f64 {
    class_union_ms(trace, true) / 1000.0
}

/// Wall time during which any actor-side phase is active.
pub fn actor_time_s(trace: &Trace) -> f64 {
    class_union_ms(trace, false) / 1000.0
}

/// Builds the standard report from a finished trace.
pub fn report_from_trace(
    trace: &Trace,
    strategy: &str,
    ratio: &str,
) -> Result<MetricsReport, MetricsError> {
    let total_s = trace.makespan_ms() / 1000.0;
    let throughput = compute_throughput(
        trace.dims.rollout_epochs as u64,
        trace.dims.n_env as u64,
        trace.dims.episode_steps as u64,
        total_s,
    )?;
    let mut per_device_utilization = BTreeMap::new();
    let mut devices: Vec<u32> = trace
        .dims
        .rollout_devices
        .iter()
        .chain(&trace.dims.actor_devices)
        .copied()
        .collect();
    devices.sort_unstable();
    devices.dedup();
    for d in devices {
        per_device_utilization.insert(d, utilization(trace, d));
    }
    Ok(MetricsReport {
        strategy: strategy.to_string(),
        n_devices: trace.dims.n_devices,
        ratio: ratio.to_string(),
        throughput,
        total_s,
        rollout_s: rollout_time_s(trace),
        actor_s: actor_time_s(trace),
        per_device_utilization,
        env_steps_total: trace.stats.env_steps_total,
        config_fingerprint: trace.config_fingerprint.clone(),
        seed: trace.seed,
    })
}

/// One row of a scaling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub nodes: u32,
    pub throughput: f64,
    /// `throughput(n) / (n / n0 * throughput(n0))`.
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// First node count whose efficiency drops below the threshold.
    pub first_below_threshold: Option<u32>,
    pub threshold: f64,
}

pub fn scaling_report(
    runs: &BTreeMap<u32, MetricsReport>,
    threshold: f64,
) -> Result<ScalingReport, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewScales);
    }
    let (&n0, base) = runs.iter().next().unwrap();
    let base_throughput = base.throughput;
    let mut rows = Vec::with_capacity(runs.len());
    let mut first_below = None;
    for (&n, report) in runs {
        let ideal = n as f64 / n0 as f64 * base_throughput;
        let efficiency = report.throughput / ideal;
        if efficiency < threshold && first_below.is_none() && n != n0 {
            first_below = Some(n);
        }
        rows.push(ScalingRow { nodes: n, throughput: report.throughput, efficiency });
    }
    Ok(ScalingReport { rows, first_below_threshold: first_below, threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: String,
    pub rollout_s: f64,
    pub actor_s: f64,
    pub makespan_s: f64,
    pub throughput: f64,
    /// Absolute rollout/actor phase-time gap; small means balanced.
    pub phase_gap_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBalanceReport {
    pub rows: Vec<RatioRow>,
    pub best_ratio: String,
}

/// Compares device-ratio variants; "best" minimizes makespan.
pub fn ratio_balance_report(
    runs: &[(String, MetricsReport)],
) -> Result<RatioBalanceReport, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRatios);
    }
    let rows: Vec<RatioRow> = runs
        .iter()
        .map(|(ratio, r)| RatioRow {
            ratio: ratio.clone(),
            rollout_s: r.rollout_s,
            actor_s: r.actor_s,
            makespan_s: r.total_s,
            throughput: r.throughput,
            phase_gap_s: (r.rollout_s - r.actor_s).abs(),
        })
        .collect();
    let best = rows
        .iter()
        .min_by(|a, b| a.makespan_s.total_cmp(&b.makespan_s))
        .unwrap()
        .ratio
        .clone();
    Ok(RatioBalanceReport { rows, best_ratio: best })
}

/// Stable column order shared by all CSV outputs.
pub const REPORT_COLUMNS: [&str; 8] = [
    "strategy",
    "n_devices",
    "ratio",
    "throughput",
    "total_s",
    "rollout_s",
    "actor_s",
    "increase_pct",
];

/// Renders comparison rows as CSV with the stable column set;
/// `increase_pct` is relative to `baseline_throughput`.
pub fn comparison_csv(rows: &[(String, MetricsReport)], baseline_throughput: f64) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for (_, r) in rows {
        let increase = speedup_percent(baseline_throughput, r.throughput);
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.strategy, r.n_devices, r.ratio, r.throughput, r.total_s, r.rollout_s, r.actor_s, increase
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{EventMeta, RunDims, TraceEvent, TraceStats, WorkerRef};

    #[test]
    fn throughput_reproduces_reported_values() {
        // Colocated 8-device setup: (4 epochs, 128 envs, 480 steps) over
        // 807.4 s -> 304.39, within 0.05% of the published 304.54.
        let t = compute_throughput(4, 128, 480, 807.4).unwrap();
        assert!((t - 304.39).abs() < 0.01, "{t}");
        assert!((t - 304.54).abs() / 304.54 < 0.001);
        assert_eq!(compute_throughput(1, 1, 1, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn throughput_inversion() {
        // 289.23 steps/s at (8, 64, 480) implies 849.7 s total.
        let total = (8u64 * 64 * 480) as f64 / 289.23;
        assert!((total - 849.7).abs() < 0.05, "{total}");
        let t = compute_throughput(8, 64, 480, total).unwrap();
        assert!((t - 289.23).abs() < 1e-9);
    }

    #[test]
    fn throughput_rejects_nonpositive_time() {
        assert!(matches!(
            compute_throughput(1, 1, 1, 0.0),
            Err(MetricsError::NonPositiveTime(_))
        ));
    }

    #[test]
    fn speedup_matches_published_rows() {
        assert!((speedup_percent(289.23, 383.40) - 32.56).abs() < 0.01);
        assert!((speedup_percent(132.56, 126.65) + 4.46).abs() < 0.01);
        assert_eq!(speedup_percent(123.0, 123.0), 0.0);
    }

    #[test]
    fn speedup_antisymmetry_identity() {
        // speedup(a, b) == -speedup(b, a) * b / a, algebraically exact.
        for (a, b) in [(289.23, 383.40), (1.0, 2.0), (100.0, 37.5)] {
            let lhs = speedup_percent(a, b);
            let rhs = -speedup_percent(b, a) * b / a;
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    fn trace_with(events: Vec<TraceEvent>) -> Trace {
        Trace {
            config_fingerprint: "f".into(),
            seed: 0,
            dims: RunDims {
                n_devices: 2,
                rollout_devices: vec![0],
                actor_devices: vec![1],
                n_env: 1,
                rollout_epochs: 1,
                episode_steps: 1,
            },
            stats: TraceStats::default(),
            events,
        }
    }

    fn ev(device: u32, phase: Phase, start: f64, end: f64) -> TraceEvent {
        TraceEvent {
            worker: WorkerRef::Rollout(0),
            device: Some(device),
            phase,
            start_ms: start,
            end_ms: end,
            meta: EventMeta::default(),
        }
    }

    #[test]
    fn utilization_full_and_half() {
        let trace = trace_with(vec![
            ev(0, Phase::Inference, 0.0, 100.0),
            ev(1, Phase::TrainMicro, 50.0, 100.0),
        ]);
        assert!((utilization(&trace, 0) - 1.0).abs() < 1e-12);
        assert!((utilization(&trace, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn phase_class_unions() {
        // Overlapping rollout intervals count once.
        let trace = trace_with(vec![
            ev(0, Phase::EnvStep, 0.0, 60.0),
            ev(0, Phase::Inference, 40.0, 100.0),
            ev(1, Phase::TrainMicro, 90.0, 120.0),
        ]);
        assert!((rollout_time_s(&trace) - 0.1).abs() < 1e-12);
        assert!((actor_time_s(&trace) - 0.03).abs() < 1e-12);
    }

    fn report(throughput: f64, total: f64) -> MetricsReport {
        MetricsReport {
            strategy: "disaggregated".into(),
            n_devices: 8,
            ratio: "1:1".into(),
            throughput,
            total_s: total,
            rollout_s: 0.0,
            actor_s: 0.0,
            per_device_utilization: BTreeMap::new(),
            env_steps_total: 0,
            config_fingerprint: String::new(),
            seed: 0,
        }
    }

    #[test]
    fn scaling_efficiency_from_published_pair() {
        // 289.23 -> 547.55 when doubling devices: efficiency 0.947.
        let mut runs = BTreeMap::new();
        runs.insert(1, report(289.23, 1.0));
        runs.insert(2, report(547.55, 1.0));
        let rep = scaling_report(&runs, 0.9).unwrap();
        assert!((rep.rows[1].efficiency - 0.9466).abs() < 1e-3);
        assert_eq!(rep.first_below_threshold, None);
        let rep = scaling_report(&runs, 0.95).unwrap();
        assert_eq!(rep.first_below_threshold, Some(2));
    }

    #[test]
    fn scaling_needs_two_points() {
        let mut runs = BTreeMap::new();
        runs.insert(1, report(1.0, 1.0));
        assert_eq!(scaling_report(&runs, 0.9), Err(MetricsError::TooFewScales));
    }

    #[test]
    fn ratio_report_picks_min_makespan() {
        let rows = vec![
            ("1:1".to_string(), report(100.0, 50.0)),
            ("3:1".to_string(), report(120.0, 40.0)),
        ];
        let rep = ratio_balance_report(&rows).unwrap();
        assert_eq!(rep.best_ratio, "3:1");
        assert_eq!(rep.rows.len(), 2);
        assert!(ratio_balance_report(&rows[..1]).is_err());
    }

    #[test]
    fn comparison_csv_stable_columns() {
        let rows = vec![("a".to_string(), report(100.0, 10.0))];
        let csv = comparison_csv(&rows, 80.0);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "strategy,n_devices,ratio,throughput,total_s,rollout_s,actor_s,increase_pct"
        );
        assert!(lines.next().unwrap().ends_with("25.0000"));
    }
}
