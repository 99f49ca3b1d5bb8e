//! Per-instance episode state machine.
//!
//! An episode alternates env-step phases (which end with an observation
//! ready for inference) and inference waits (which end with a chunk of
//! actions). After the final chunk's actions arrive the episode is complete
//! and yields a [`Trajectory`].

use super::{InferenceRequest, PipelineError, StepRecord, Trajectory, TrajectoryRecords};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpisodeState {
    /// Env is stepping; an observation will be ready at phase end.
    Stepping,
    /// Observation submitted; waiting for an action chunk.
    AwaitingActions,
    Complete,
}

/// What an env instance does next after receiving actions.
#[derive(Debug, PartialEq)]
pub enum EnvStepOutcome {
    /// More chunks remain; the env enters another step phase.
    NeedsStep,
    /// Episode finished.
    Completed(Trajectory),
}

#[derive(Debug)]
pub struct EnvEpisode {
    pub env_id: usize,
    episode_steps: u32,
    chunk_size: u32,
    next_chunk: u32,
    steps_done: u32,
    pinned_version: u64,
    last_version: u64,
    live_records: Option<Vec<StepRecord>>,
    state: EpisodeState,
}

impl EnvEpisode {
    /// Starts an episode pinned to the policy version current at start time.
    pub fn new(
        env_id: usize,
        episode_steps: u32,
        chunk_size: u32,
        pinned_version: u64,
        live: bool,
    ) -> Self {
        EnvEpisode {
            env_id,
            episode_steps,
            chunk_size,
            next_chunk: 0,
            steps_done: 0,
            pinned_version,
            last_version: pinned_version,
            live_records: live.then(Vec::new),
            state: EpisodeState::Stepping,
        }
    }

    pub fn pinned_version(&self) -> u64 {
        self.pinned_version
    }

    /// Chunk index the next action delivery will cover.
    pub fn next_chunk(&self) -> u32 {
        self.next_chunk
    }

    pub fn is_complete(&self) -> bool {
        self.state == EpisodeState::Complete
    }

    pub fn n_chunks(&self) -> u32 {
        self.episode_steps.div_ceil(self.chunk_size)
    }

    /// Steps covered by the given chunk (the last chunk may be partial).
    pub fn chunk_steps(&self, chunk_index: u32) -> u32 {
        let done = chunk_index * self.chunk_size;
        self.chunk_size.min(self.episode_steps - done.min(self.episode_steps))
    }

    /// Ends the current env-step phase: the observation for the next chunk
    /// is ready and becomes an inference request.
    pub fn observation_ready(
        &mut self,
        context: Option<usize>,
        now_ms: f64,
    ) -> Result<InferenceRequest, PipelineError> {
        match self.state {
            EpisodeState::Stepping => {
                self.state = EpisodeState::AwaitingActions;
                Ok(InferenceRequest {
                    env_id: self.env_id,
                    chunk_index: self.next_chunk,
                    context,
                    enqueue_time_ms: now_ms,
                })
            }
            EpisodeState::AwaitingActions => Err(PipelineError::InconsistentConfig(format!(
                "env {} already awaiting actions",
                self.env_id
            ))),
            EpisodeState::Complete => Err(PipelineError::StepAfterDone(self.env_id)),
        }
    }

    /// Consumes one action chunk. In live mode `records` carries the per-step
    /// records produced under the serving snapshot; the virtual engine passes
    /// an empty slice and only step counts are tracked.
    pub fn actions_received(
        &mut self,
        serving_version: u64,
        records: &[StepRecord],
        now_ms: f64,
    ) -> Result<EnvStepOutcome, PipelineError> {
        match self.state {
            EpisodeState::AwaitingActions => {}
            EpisodeState::Complete => return Err(PipelineError::StepAfterDone(self.env_id)),
            EpisodeState::Stepping => {
                return Err(PipelineError::InconsistentConfig(format!(
                    "env {} received actions while stepping",
                    self.env_id
                )))
            }
        }
        let steps = self.chunk_steps(self.next_chunk);
        self.last_version = serving_version;
        if let Some(recs) = &mut self.live_records {
            debug_assert_eq!(records.len() as u32, steps);
            recs.extend_from_slice(records);
        }
        self.steps_done += steps;
        self.next_chunk += 1;
        if self.next_chunk == self.n_chunks() {
            self.state = EpisodeState::Complete;
            debug_assert_eq!(self.steps_done, self.episode_steps);
            Ok(EnvStepOutcome::Completed(Trajectory {
                env_id: self.env_id,
                policy_version: self.pinned_version,
                last_version: self.last_version,
                n_steps: self.episode_steps,
                created_at_ms: now_ms,
                records: match self.live_records.take() {
                    Some(recs) => TrajectoryRecords::Live(recs),
                    None => TrajectoryRecords::Opaque { n_steps: self.episode_steps },
                },
            }))
        } else {
            self.state = EpisodeState::Stepping;
            Ok(EnvStepOutcome::NeedsStep)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_episode(steps: u32, chunk: u32) -> (u32, Trajectory) {
        let mut ep = EnvEpisode::new(0, steps, chunk, 3, false);
        let mut requests = 0;
        loop {
            let req = ep.observation_ready(None, 0.0).unwrap();
            assert_eq!(req.chunk_index, requests);
            requests += 1;
            match ep.actions_received(3, &[], 0.0).unwrap() {
                EnvStepOutcome::NeedsStep => {}
                EnvStepOutcome::Completed(t) => return (requests, t),
            }
        }
    }

    #[test]
    fn request_count_is_steps_over_chunk() {
        // Replayed-episode oracle: 480 steps at chunk 10 -> 48 requests.
        let (requests, traj) = run_episode(480, 10);
        assert_eq!(requests, 48);
        assert_eq!(traj.n_steps, 480);
        // Partial last chunk still covers every step.
        let (requests, traj) = run_episode(485, 10);
        assert_eq!(requests, 49);
        assert_eq!(traj.n_steps, 485);
    }

    #[test]
    fn completion_marker_at_final_chunk() {
        let mut ep = EnvEpisode::new(7, 20, 10, 0, false);
        ep.observation_ready(None, 0.0).unwrap();
        assert_eq!(ep.actions_received(0, &[], 0.0).unwrap(), EnvStepOutcome::NeedsStep);
        ep.observation_ready(None, 0.0).unwrap();
        match ep.actions_received(0, &[], 5.0).unwrap() {
            EnvStepOutcome::Completed(t) => {
                assert_eq!(t.env_id, 7);
                assert_eq!(t.created_at_ms, 5.0);
            }
            other => panic!("expected completion, got {other:?}"),
        }
    }

    #[test]
    fn step_after_done_rejected() {
        let mut ep = EnvEpisode::new(2, 10, 10, 0, false);
        ep.observation_ready(None, 0.0).unwrap();
        let _ = ep.actions_received(0, &[], 0.0).unwrap();
        assert!(ep.is_complete());
        assert_eq!(
            ep.observation_ready(None, 0.0).unwrap_err(),
            PipelineError::StepAfterDone(2)
        );
        assert_eq!(
            ep.actions_received(0, &[], 0.0).unwrap_err(),
            PipelineError::StepAfterDone(2)
        );
    }

    #[test]
    fn version_pinning_and_adoption_tracking() {
        let mut ep = EnvEpisode::new(0, 20, 10, 4, false);
        ep.observation_ready(None, 0.0).unwrap();
        ep.actions_received(4, &[], 0.0).unwrap();
        ep.observation_ready(None, 0.0).unwrap();
        // Mid-episode adoption would serve a newer version; the pin stays.
        match ep.actions_received(5, &[], 0.0).unwrap() {
            EnvStepOutcome::Completed(t) => {
                assert_eq!(t.policy_version, 4);
                assert_eq!(t.last_version, 5);
            }
            _ => panic!(),
        }
    }
}
