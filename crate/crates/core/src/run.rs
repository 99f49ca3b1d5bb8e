//! Runs one resolved experiment end-to-end on either engine and produces
//! the trace plus metrics report.

use crate::config::{EngineKind, ResolvedExperiment};
use crate::engine::live::{run_live, LiveRunResult, SuccessPoint, ToyParams};
use crate::engine::virtual_engine::run_virtual;
use crate::engine::{EngineError, Trace};
use crate::metrics::{report_from_trace, MetricsReport};
use crate::pipeline::PipelineConfig;
use crate::workload::{PlacementPlan, WorkloadSpec};

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub report: MetricsReport,
    /// Live mode only: final policy weights (row-major).
    pub final_weights: Option<Vec<f64>>,
    /// Live mode only: exact success rate after each update.
    pub success_curve: Option<Vec<SuccessPoint>>,
}

/// Executes the strategy encoded by `(config, plan, workload)` on the
/// virtual engine and reports metrics.
pub fn run_strategy(
    cfg: &PipelineConfig,
    plan: &PlacementPlan,
    workload: &WorkloadSpec,
    seed: u64,
) -> Result<(Trace, MetricsReport), EngineError> {
    let trace = run_virtual(cfg, plan, workload, seed, "adhoc")?;
    let report = report_from_trace(&trace, "adhoc", "-")
        .map_err(|e| EngineError::Parse(e.to_string()))?;
    Ok((trace, report))
}

/// Runs one seed of a resolved experiment.
pub fn run_resolved(exp: &ResolvedExperiment, seed: u64) -> Result<RunOutput, EngineError> {
    let (trace, final_weights, success_curve) = match exp.engine {
        EngineKind::Virtual => {
            let trace = run_virtual(&exp.pipeline, &exp.placement, &exp.workload, seed, &exp.fingerprint)?;
            (trace, None, None)
        }
        EngineKind::Live => {
            let LiveRunResult { trace, final_weights, success_curve } = run_live(
                &exp.pipeline,
                &exp.placement,
                &exp.workload,
                seed,
                &exp.fingerprint,
                &ToyParams { n_arms: exp.toyrl.n_arms, learning_rate: exp.toyrl.learning_rate },
                exp.time_scale,
            )?;
            (trace, Some(final_weights), Some(success_curve))
        }
    };
    let report = report_from_trace(&trace, &exp.strategy_label, &exp.ratio_label)
        .map_err(|e| EngineError::Parse(e.to_string()))?;
    Ok(RunOutput { trace, report, final_weights, success_curve })
}

/// Renders a success-rate curve as CSV.
pub fn success_curve_csv(curve: &[SuccessPoint]) -> String {
    let mut out = String::from("update_index,exact_success_rate,policy_version\n");
    for p in curve {
        out.push_str(&format!("{},{:.9},{}\n", p.update_index, p.success_rate, p.policy_version));
    }
    out
}
