//! Latency/cost models for environment stepping, batched inference, training,
//! and weight sync, plus device pools and placement plans.
//!
//! All durations are virtual milliseconds stored as `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("invalid latency model: {0}")]
    InvalidModel(String),
    #[error("ratio ({0}+{1}) does not divide {2} devices")]
    IndivisibleRatio(u32, u32, u32),
    #[error("strategy {0:?} requires at least {1} devices, got {2}")]
    TooFewDevices(Strategy, u32, u32),
    #[error("hybrid placement must be enabled explicitly")]
    UnsupportedStrategy,
}

/// Service-time distribution for one pipeline phase.
///
/// `LogNormalShifted` consumes exactly one uniform draw per sample (inverse
/// CDF transform); the other kinds consume none, so RNG streams shared
/// between simulation variants stay aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    /// Fixed duration.
    Deterministic { value_ms: f64 },
    /// `shift + exp(N(mu, sigma^2))`; models a long-tailed CPU env step.
    LogNormalShifted { mu: f64, sigma: f64, shift_ms: f64 },
    /// `base + per_item * batch`; models batched model inference.
    BatchAffine { base_ms: f64, per_item_ms: f64 },
    /// Same cost shape as `BatchAffine`, but the work runs on a device and
    /// splitting a batch of B into k pieces costs `k*base + per_item*B`.
    /// Models GPU-parallel env stepping that async scheduling fragments.
    BatchedEnvAffine { base_ms: f64, per_item_ms: f64 },
}

impl LatencyModel {
    /// Validates parameters; invalid models are rejected here, never at
    /// sampling time.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: &str| Err(WorkloadError::InvalidModel(msg.to_string()));
        match *self {
            LatencyModel::Deterministic { value_ms } => {
                if !(value_ms >= 0.0 && value_ms.is_finite()) {
                    return bad("deterministic value must be finite and >= 0");
                }
            }
            LatencyModel::LogNormalShifted { mu, sigma, shift_ms } => {
                if !sigma.is_finite() || sigma <= 0.0 {
                    return bad("lognormal sigma must be finite and > 0");
                }
                if !mu.is_finite() {
                    return bad("lognormal mu must be finite");
                }
                if !(shift_ms >= 0.0 && shift_ms.is_finite()) {
                    return bad("lognormal shift must be finite and >= 0");
                }
            }
            LatencyModel::BatchAffine { base_ms, per_item_ms }
            | LatencyModel::BatchedEnvAffine { base_ms, per_item_ms } => {
                if !(base_ms >= 0.0 && base_ms.is_finite()) {
                    return bad("affine base must be finite and >= 0");
                }
                if !(per_item_ms >= 0.0 && per_item_ms.is_finite()) {
                    return bad("affine per-item cost must be finite and >= 0");
                }
            }
        }
        Ok(())
    }

    /// True when the cost runs on a device as a batch (GPU-parallel env).
    pub fn is_batched_env(&self) -> bool {
        matches!(self, LatencyModel::BatchedEnvAffine { .. })
    }
}

/// Samples a duration for a batch of `batch_size` items.
///
/// `batch_size` is ignored by the per-instance kinds. The result is always
/// finite and non-negative.
pub fn sample_latency<R: Rng>(model: &LatencyModel, batch_size: usize, rng: &mut R) -> f64 {
    debug_assert!(batch_size >= 1);
    match *model {
        LatencyModel::Deterministic { value_ms } => value_ms,
        LatencyModel::LogNormalShifted { mu, sigma, shift_ms } => {
            // One uniform draw, turned into a normal via the inverse CDF.
            let u: f64 = rng.gen::<f64>().clamp(1e-15, 1.0 - 1e-15);
            let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(u);
            shift_ms + (mu + sigma * z).exp()
        }
        LatencyModel::BatchAffine { base_ms, per_item_ms }
        | LatencyModel::BatchedEnvAffine { base_ms, per_item_ms } => {
            base_ms + per_item_ms * batch_size as f64
        }
    }
}

/// GPU placement strategy for the worker types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All worker types share every device; phases alternate.
    Colocated,
    /// Rollout and actor workers own disjoint device sets.
    Disaggregated,
    /// Env stepping colocated with actor devices, rollout on its own devices.
    Hybrid,
}

/// A pool of identical simulated accelerators, ids `0..n_devices`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevicePool {
    pub n_devices: u32,
}

/// Strategy plus the concrete worker-to-device assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    pub n_devices: u32,
    pub rollout_devices: Vec<u32>,
    pub actor_devices: Vec<u32>,
    /// (rollout_share, actor_share); `(1, 1)` for colocated.
    pub ratio: (u32, u32),
}

impl PlacementPlan {
    pub fn is_disjoint(&self) -> bool {
        self.rollout_devices.iter().all(|d| !self.actor_devices.contains(d))
    }
}

/// Builds a placement plan. Rollout always receives the lowest device ids.
pub fn build_placement(
    strategy: Strategy,
    n_devices: u32,
    ratio: (u32, u32),
) -> Result<PlacementPlan, WorkloadError> {
    build_placement_with(strategy, n_devices, ratio, false)
}

/// Like [`build_placement`], with hybrid placements gated behind a flag.
pub fn build_placement_with(
    strategy: Strategy,
    n_devices: u32,
    ratio: (u32, u32),
    allow_hybrid: bool,
) -> Result<PlacementPlan, WorkloadError> {
    if n_devices == 0 {
        return Err(WorkloadError::TooFewDevices(strategy, 1, 0));
    }
    match strategy {
        Strategy::Colocated => {
            let all: Vec<u32> = (0..n_devices).collect();
            Ok(PlacementPlan {
                strategy,
                n_devices,
                rollout_devices: all.clone(),
                actor_devices: all,
                ratio: (1, 1),
            })
        }
        Strategy::Disaggregated | Strategy::Hybrid => {
            if strategy == Strategy::Hybrid && !allow_hybrid {
                return Err(WorkloadError::UnsupportedStrategy);
            }
            if n_devices < 2 {
                return Err(WorkloadError::TooFewDevices(strategy, 2, n_devices));
            }
            let (r, a) = ratio;
            if r == 0 || a == 0 || n_devices % (r + a) != 0 {
                return Err(WorkloadError::IndivisibleRatio(r, a, n_devices));
            }
            let n_rollout = n_devices / (r + a) * r;
            Ok(PlacementPlan {
                strategy,
                n_devices,
                rollout_devices: (0..n_rollout).collect(),
                actor_devices: (n_rollout..n_devices).collect(),
                ratio,
            })
        }
    }
}

/// Calibration surface for one experiment: every latency and comm knob the
/// engines charge against virtual time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub env_step: LatencyModel,
    pub inference: LatencyModel,
    pub train_microbatch: LatencyModel,
    pub grad_aggregate_ms: f64,
    pub weight_sync_ms: f64,
    /// Queue transfer cost charged to the producer per pushed trajectory.
    pub comm_per_trajectory_ms: f64,
    /// Multiplies `comm_per_trajectory_ms` by `1 + scale * (nodes - 1)`.
    pub comm_scale_per_node: f64,
    /// Optional `(env_index, factor)` slowdown applied to one env instance's
    /// per-instance step samples.
    #[serde(default)]
    pub straggler: Option<(usize, f64)>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.env_step.validate()?;
        self.inference.validate()?;
        self.train_microbatch.validate()?;
        for (name, v) in [
            ("grad_aggregate_ms", self.grad_aggregate_ms),
            ("weight_sync_ms", self.weight_sync_ms),
            ("comm_per_trajectory_ms", self.comm_per_trajectory_ms),
            ("comm_scale_per_node", self.comm_scale_per_node),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(WorkloadError::InvalidModel(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if let Some((_, f)) = self.straggler {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(WorkloadError::InvalidModel(
                    "straggler factor must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective per-trajectory transfer cost at a given node count.
    pub fn comm_per_trajectory_at(&self, nodes: u32) -> f64 {
        self.comm_per_trajectory_ms * (1.0 + self.comm_scale_per_node * (nodes.max(1) - 1) as f64)
    }

    pub fn straggler_factor(&self, env_index: usize) -> f64 {
        match self.straggler {
            Some((idx, f)) if idx == env_index => f,
            _ => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn deterministic_identity() {
        let m = LatencyModel::Deterministic { value_ms: 5.0 };
        assert_eq!(sample_latency(&m, 1, &mut rng(0)), 5.0);
        assert_eq!(sample_latency(&m, 64, &mut rng(1)), 5.0);
    }

    #[test]
    fn batch_affine_cost() {
        let m = LatencyModel::BatchAffine { base_ms: 10.0, per_item_ms: 0.5 };
        assert_eq!(sample_latency(&m, 64, &mut rng(0)), 42.0);
    }

    #[test]
    fn batch_affine_exactly_linear() {
        let m = LatencyModel::BatchAffine { base_ms: 7.0, per_item_ms: 1.25 };
        let mut r = rng(3);
        for b1 in 1usize..40 {
            for b2 in 1usize..40 {
                let lhs = sample_latency(&m, b1, &mut r) + sample_latency(&m, b2, &mut r) - 7.0;
                let rhs = sample_latency(&m, b1 + b2, &mut r);
                assert!((lhs - rhs).abs() < 1e-9, "b1={b1} b2={b2}");
            }
        }
    }

    #[test]
    fn batched_env_splitting_penalty() {
        // Stepping B envs as k sub-batches costs k*a + b*B >= a + b*B,
        // equality only at k = 1.
        let (a, b) = (400.0, 2.0);
        let m = LatencyModel::BatchedEnvAffine { base_ms: a, per_item_ms: b };
        let total = 64usize;
        let whole = sample_latency(&m, total, &mut rng(0));
        for k in 1usize..=8 {
            let per = total / k;
            let rem = total - per * k;
            let mut split = 0.0;
            for i in 0..k {
                let sz = per + if i == 0 { rem } else { 0 };
                split += sample_latency(&m, sz, &mut rng(0));
            }
            if k == 1 {
                assert!((split - whole).abs() < 1e-9);
            } else {
                assert!(split > whole, "k={k}: {split} <= {whole}");
                assert!((split - (k as f64 * a + b * total as f64)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lognormal_monte_carlo_matches_closed_form_mean() {
        // Closed-form mean of shift + LogNormal(mu, sigma):
        // shift + exp(mu + sigma^2 / 2).
        let (mu, sigma, shift) = (3.0, 0.5, 20.0);
        let m = LatencyModel::LogNormalShifted { mu, sigma, shift_ms: shift };
        let mut r = rng(7);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let s = sample_latency(&m, 1, &mut r);
            assert!(s.is_finite() && s >= 0.0);
            sum += s;
        }
        let mc_mean = sum / n as f64;
        let exact = shift + (mu + sigma * sigma / 2.0).exp();
        assert!(
            (mc_mean - exact).abs() <= 0.1,
            "MC mean {mc_mean} vs closed form {exact}"
        );
    }

    #[test]
    fn lognormal_consumes_one_draw_per_sample() {
        let m = LatencyModel::LogNormalShifted { mu: 1.0, sigma: 0.4, shift_ms: 2.0 };
        let mut r1 = rng(11);
        let mut r2 = rng(11);
        let _ = sample_latency(&m, 1, &mut r1);
        let _: f64 = r2.gen();
        // Both streams advanced by exactly one u64-backed f64 draw.
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn samples_nonnegative_and_finite() {
        let models = [
            LatencyModel::Deterministic { value_ms: 0.0 },
            LatencyModel::LogNormalShifted { mu: -2.0, sigma: 3.0, shift_ms: 0.0 },
            LatencyModel::BatchAffine { base_ms: 0.0, per_item_ms: 0.0 },
            LatencyModel::BatchedEnvAffine { base_ms: 1.0, per_item_ms: 0.1 },
        ];
        let mut r = rng(13);
        for m in &models {
            for i in 0..1_000_000usize {
                let s = sample_latency(m, 1 + i % 64, &mut r);
                assert!(s.is_finite() && s >= 0.0, "{m:?} produced {s}");
            }
        }
    }

    #[test]
    fn cost_monotone_in_batch_size() {
        let m = LatencyModel::BatchedEnvAffine { base_ms: 5.0, per_item_ms: 0.25 };
        let mut prev = 0.0;
        for b in 1usize..200 {
            let c = sample_latency(&m, b, &mut rng(0));
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(LatencyModel::LogNormalShifted { mu: 0.0, sigma: 0.0, shift_ms: 0.0 }
            .validate()
            .is_err());
        assert!(LatencyModel::LogNormalShifted { mu: 0.0, sigma: -1.0, shift_ms: 0.0 }
            .validate()
            .is_err());
        assert!(LatencyModel::BatchAffine { base_ms: -1.0, per_item_ms: 0.0 }
            .validate()
            .is_err());
        assert!(LatencyModel::Deterministic { value_ms: f64::NAN }.validate().is_err());
        assert!(LatencyModel::Deterministic { value_ms: 5.0 }.validate().is_ok());
    }

    #[test]
    fn placement_disaggregated_3_1() {
        let p = build_placement(Strategy::Disaggregated, 8, (3, 1)).unwrap();
        assert_eq!(p.rollout_devices, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(p.actor_devices, vec![6, 7]);
        assert!(p.is_disjoint());
    }

    #[test]
    fn placement_colocated() {
        let p = build_placement(Strategy::Colocated, 8, (1, 1)).unwrap();
        let all: Vec<u32> = (0..8).collect();
        assert_eq!(p.rollout_devices, all);
        assert_eq!(p.actor_devices, all);
    }

    #[test]
    fn placement_even_split() {
        let p = build_placement(Strategy::Disaggregated, 8, (1, 1)).unwrap();
        assert_eq!(p.rollout_devices, vec![0, 1, 2, 3]);
        assert_eq!(p.actor_devices, vec![4, 5, 6, 7]);
        // Share sizes match the ratio exactly.
        assert_eq!(p.rollout_devices.len() / p.actor_devices.len(), 1);
    }

    #[test]
    fn placement_indivisible_ratio() {
        assert_eq!(
            build_placement(Strategy::Disaggregated, 7, (3, 1)),
            Err(WorkloadError::IndivisibleRatio(3, 1, 7))
        );
    }

    #[test]
    fn placement_hybrid_gated() {
        assert_eq!(
            build_placement(Strategy::Hybrid, 8, (3, 1)),
            Err(WorkloadError::UnsupportedStrategy)
        );
        let p = build_placement_with(Strategy::Hybrid, 8, (3, 1), true).unwrap();
        assert_eq!(p.rollout_devices.len(), 6);
        assert_eq!(p.actor_devices.len(), 2);
    }

    #[test]
    fn placement_deterministic() {
        let a = build_placement(Strategy::Disaggregated, 12, (2, 1)).unwrap();
        let b = build_placement(Strategy::Disaggregated, 12, (2, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn comm_scaling() {
        let w = WorkloadSpec {
            env_step: LatencyModel::Deterministic { value_ms: 1.0 },
            inference: LatencyModel::BatchAffine { base_ms: 1.0, per_item_ms: 1.0 },
            train_microbatch: LatencyModel::Deterministic { value_ms: 1.0 },
            grad_aggregate_ms: 0.0,
            weight_sync_ms: 0.0,
            comm_per_trajectory_ms: 10.0,
            comm_scale_per_node: 0.5,
            straggler: None,
        };
        assert_eq!(w.comm_per_trajectory_at(1), 10.0);
        assert_eq!(w.comm_per_trajectory_at(3), 20.0);
    }
}
