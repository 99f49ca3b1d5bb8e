//! Resolved pipeline configuration and batch/round accounting.

use super::batcher::TriggerConfig;
use super::PipelineError;
use crate::workload::PlacementPlan;
use serde::{Deserialize, Serialize};

/// Inference trigger thresholds as configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchTriggerConfig {
    pub max_batch: usize,
    pub max_wait_ms: f64,
}

/// Micro-batch pipelining of the training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamerConfig {
    pub enabled: bool,
    pub micro_batch: usize,
    pub global_batch: usize,
}

/// Everything the engines need to run one experiment, already resolved to
/// effective totals (envs, batch sizes scaled by node count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_async: bool,
    pub rollout_async: bool,
    pub streamer: StreamerConfig,
    pub trigger: BatchTriggerConfig,
    pub max_staleness: u64,
    pub n_env: usize,
    pub n_rollout_epochs: u32,
    pub episode_steps: u32,
    pub chunk_size: u32,
    /// `None` means unbounded.
    pub queue_capacity: Option<usize>,
    pub mid_episode_adoption: bool,
    pub context_switch_ms: f64,
    pub starvation_timeout_ms: f64,
    pub nodes: u32,
}

impl PipelineConfig {
    /// Trigger the batcher actually runs with. Lockstep mode degenerates to
    /// whole-batch: every inference waits for all of the worker's envs.
    pub fn effective_trigger(&self, worker_env_count: usize) -> TriggerConfig {
        if self.rollout_async {
            TriggerConfig {
                max_batch: self.trigger.max_batch,
                max_wait_ms: self.trigger.max_wait_ms,
            }
        } else {
            TriggerConfig { max_batch: worker_env_count.max(1), max_wait_ms: f64::INFINITY }
        }
    }

    pub fn chunks_per_episode(&self) -> u32 {
        self.episode_steps.div_ceil(self.chunk_size)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::InconsistentConfig(msg));
        if self.n_env == 0 {
            return fail("n_env must be >= 1".into());
        }
        if self.n_rollout_epochs == 0 {
            return fail("n_rollout_epochs must be >= 1".into());
        }
        if self.episode_steps == 0 || self.chunk_size == 0 {
            return fail("n_es and chunk_size must be >= 1".into());
        }
        if self.trigger.max_batch == 0 {
            return fail("b_max must be >= 1".into());
        }
        if !(self.trigger.max_wait_ms >= 0.0) {
            return fail("t_max must be >= 0".into());
        }
        if self.streamer.global_batch == 0 || self.streamer.micro_batch == 0 {
            return fail("global_batch and micro_batch must be >= 1".into());
        }
        if self.streamer.micro_batch > self.streamer.global_batch {
            return fail(format!(
                "micro_batch {} exceeds global_batch {}",
                self.streamer.micro_batch, self.streamer.global_batch
            ));
        }
        if self.queue_capacity == Some(0) {
            return fail("queue_capacity must be >= 1 when bounded".into());
        }
        if !(self.starvation_timeout_ms > 0.0) {
            return fail("starvation_timeout_ms must be > 0".into());
        }
        Ok(())
    }

    /// Cross-checks the pipeline flags against a placement plan.
    pub fn validate_against_plan(&self, plan: &PlacementPlan) -> Result<(), PipelineError> {
        if self.train_async && !plan.is_disjoint() {
            return Err(PipelineError::InconsistentConfig(
                "train_async requires disjoint rollout and actor devices (disaggregated)".into(),
            ));
        }
        Ok(())
    }
}

/// Converts sample-based batch sizes into trajectory counts, update rounds,
/// and micro-step thresholds.
///
/// A training sample is one chunked transition, so a trajectory contributes
/// `ceil(episode_steps / chunk_size)` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundPlan {
    pub samples_per_trajectory: usize,
    pub trajectories_per_round: usize,
    pub total_trajectories: usize,
    pub n_rounds: usize,
    pub micro_batch: usize,
}

impl RoundPlan {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let spt = cfg.chunks_per_episode() as usize;
        let tpr = cfg.streamer.global_batch.div_ceil(spt).max(1);
        let total = cfg.n_env * cfg.n_rollout_epochs as usize;
        RoundPlan {
            samples_per_trajectory: spt,
            trajectories_per_round: tpr,
            total_trajectories: total,
            n_rounds: total.div_ceil(tpr),
            micro_batch: cfg.streamer.micro_batch,
        }
    }

    /// Number of trajectories consumed by round `r` (the final round may be
    /// partial).
    pub fn round_size(&self, round: usize) -> usize {
        let start = round * self.trajectories_per_round;
        self.trajectories_per_round.min(self.total_trajectories - start)
    }

    /// Arrival rank (exclusive) at which round `r` has all its data.
    pub fn round_end(&self, round: usize) -> usize {
        (round * self.trajectories_per_round + self.round_size(round))
            .min(self.total_trajectories)
    }

    pub fn round_samples(&self, round: usize) -> usize {
        self.round_size(round) * self.samples_per_trajectory
    }

    pub fn micro_steps(&self, round: usize) -> usize {
        self.round_samples(round).div_ceil(self.micro_batch)
    }

    /// Sample count micro-step `j` (0-based) of a round trains on.
    pub fn micro_size(&self, round: usize, j: usize) -> usize {
        let total = self.round_samples(round);
        self.micro_batch.min(total - j * self.micro_batch)
    }

    /// Samples that must have arrived before micro-step `j` of `round` may
    /// start. Without the streamer every micro-step waits for the whole
    /// round.
    pub fn micro_ready_samples(&self, round: usize, j: usize, streamer: bool) -> usize {
        let round_start = round * self.trajectories_per_round * self.samples_per_trajectory;
        if streamer {
            round_start + (j * self.micro_batch + self.micro_size(round, j)).min(self.round_samples(round))
        } else {
            round_start + self.round_samples(round)
        }
    }

    /// Rounds whose data is fully available after `arrivals` trajectories.
    pub fn rounds_available(&self, arrivals: usize) -> usize {
        if arrivals >= self.total_trajectories {
            self.n_rounds
        } else {
            arrivals / self.trajectories_per_round
        }
    }

    /// Update round that consumes the trajectory with this arrival rank.
    pub fn round_of_arrival(&self, rank: usize) -> usize {
        (rank / self.trajectories_per_round).min(self.n_rounds - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> PipelineConfig {
        PipelineConfig {
            train_async: false,
            rollout_async: false,
            streamer: StreamerConfig { enabled: false, micro_batch: 128, global_batch: 2048 },
            trigger: BatchTriggerConfig { max_batch: 16, max_wait_ms: 500.0 },
            max_staleness: 1,
            n_env: 128,
            n_rollout_epochs: 4,
            episode_steps: 480,
            chunk_size: 10,
            queue_capacity: None,
            mid_episode_adoption: false,
            context_switch_ms: 0.0,
            starvation_timeout_ms: 1e7,
            nodes: 1,
        }
    }

    #[test]
    fn trajectories_per_round_from_sample_batch() {
        // 2048 samples at 480/10 = 48 samples per trajectory -> 43 (ceil).
        let plan = RoundPlan::new(&base_cfg());
        assert_eq!(plan.samples_per_trajectory, 48);
        assert_eq!(plan.trajectories_per_round, 43);
        assert_eq!(plan.total_trajectories, 512);
        assert_eq!(plan.n_rounds, 12);
        assert_eq!(plan.round_size(0), 43);
        assert_eq!(plan.round_size(11), 512 - 11 * 43);
    }

    #[test]
    fn micro_step_counts() {
        // ceil(1024 / 128) = 8 micro-steps per round.
        let mut cfg = base_cfg();
        cfg.streamer.global_batch = 1024;
        cfg.n_env = 64;
        cfg.episode_steps = 160;
        cfg.chunk_size = 10; // 16 samples per trajectory -> 64 per round
        let plan = RoundPlan::new(&cfg);
        assert_eq!(plan.trajectories_per_round, 64);
        assert_eq!(plan.micro_steps(0), 8);
        for j in 0..8 {
            assert_eq!(plan.micro_size(0, j), 128);
        }
    }

    #[test]
    fn streamer_thresholds() {
        let mut cfg = base_cfg();
        cfg.streamer = StreamerConfig { enabled: true, micro_batch: 128, global_batch: 2048 };
        let plan = RoundPlan::new(&cfg);
        // First micro-chunk of round 0 is ready at 128 samples...
        assert_eq!(plan.micro_ready_samples(0, 0, true), 128);
        // ...but without the streamer it waits for the full round.
        assert_eq!(plan.micro_ready_samples(0, 0, false), 43 * 48);
        // Round 1 thresholds offset by round 0's trajectory span.
        assert_eq!(plan.micro_ready_samples(1, 0, true), 43 * 48 + 128);
    }

    #[test]
    fn rounds_available_counts_partial_tail_only_at_end() {
        let plan = RoundPlan::new(&base_cfg());
        assert_eq!(plan.rounds_available(42), 0);
        assert_eq!(plan.rounds_available(43), 1);
        assert_eq!(plan.rounds_available(128), 2);
        assert_eq!(plan.rounds_available(511), 11);
        assert_eq!(plan.rounds_available(512), 12);
    }

    #[test]
    fn lockstep_trigger_degenerates() {
        let cfg = base_cfg();
        let t = cfg.effective_trigger(32);
        assert_eq!(t.max_batch, 32);
        assert!(t.max_wait_ms.is_infinite());
        let mut async_cfg = base_cfg();
        async_cfg.rollout_async = true;
        let t = async_cfg.effective_trigger(32);
        assert_eq!(t.max_batch, 16);
        assert_eq!(t.max_wait_ms, 500.0);
    }

    #[test]
    fn validation_names_bad_fields() {
        let mut cfg = base_cfg();
        cfg.streamer.micro_batch = 4096;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("micro_batch"));
    }

    #[test]
    fn train_async_needs_disjoint_devices() {
        use crate::workload::{build_placement, Strategy};
        let mut cfg = base_cfg();
        cfg.train_async = true;
        let colocated = build_placement(Strategy::Colocated, 8, (1, 1)).unwrap();
        assert!(cfg.validate_against_plan(&colocated).is_err());
        let disagg = build_placement(Strategy::Disaggregated, 8, (1, 1)).unwrap();
        assert!(cfg.validate_against_plan(&disagg).is_ok());
    }
}
