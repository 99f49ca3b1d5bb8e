//! Deterministic virtual-time discrete-event engine.
//!
//! Single-threaded: events are totally ordered by `(timestamp, sequence)`,
//! every random draw comes from a per-worker seeded stream, and identical
//! `(config, seed)` inputs produce byte-identical traces.

use super::{
    derive_seed, Consumption, EngineError, EventMeta, Phase, RunDims, Trace, TraceEvent,
    TraceStats, WorkerRef,
};
use crate::pipeline::{
    DynamicBatcher, EnvEpisode, EnvStepOutcome, PipelineConfig, PolicySnapshot, RoundPlan,
    SnapshotBoard, StalenessGate, Trajectory,
};
use crate::pipeline::batcher::TriggerConfig;
use crate::workload::{sample_latency, PlacementPlan, Strategy, WorkloadSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

/// Runs the full pipeline to completion under virtual time.
pub fn run_virtual(
    cfg: &PipelineConfig,
    plan: &PlacementPlan,
    workload: &WorkloadSpec,
    seed: u64,
    config_fingerprint: &str,
) -> Result<Trace, EngineError> {
    cfg.validate()?;
    cfg.validate_against_plan(plan)?;
    workload.validate()?;
    let mut sim = Sim::new(cfg, plan, workload, seed, config_fingerprint);
    sim.start();
    sim.run()?;
    Ok(sim.into_trace())
}

#[derive(Debug, Clone)]
enum Ev {
    EnvStepDone { env: usize },
    DeviceJobDone { device: u32 },
    BatchTimer { worker: usize, generation: u64 },
    TrajectoryArrived { env: usize },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EnvStatus {
    /// Waiting for admission (staleness gate).
    GateWait,
    /// Env-step phase in progress (or queued on a device).
    Stepping,
    AwaitingActions,
    /// Blocked on trajectory-queue capacity.
    QueueBlocked { since_ms: f64 },
    /// Trajectory transfer in flight.
    Pushing,
    /// Sync mode: waiting for the training phase to finish.
    BarrierWait,
    Done,
}

struct EnvSim {
    worker: usize,
    episodes_started: u32,
    episode: Option<EnvEpisode>,
    status: EnvStatus,
    pending_traj: Option<Trajectory>,
    step_start_ms: f64,
    rng: ChaCha8Rng,
}

struct WorkerSim {
    device: u32,
    /// Device charged for GPU-batched env stepping (actor-side under hybrid).
    env_device: u32,
    envs: Vec<usize>,
    batcher: DynamicBatcher,
    trigger: TriggerConfig,
    timer_generation: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
enum Job {
    EnvBatch { worker: usize, envs: Vec<usize> },
    Inference { worker: usize, batch: Vec<(usize, u64)> },
    TrainMicro { lane: u32, round: usize },
    GradAggregate { lane: u32, round: usize },
    WeightSync { lane: u32, round: usize },
}

impl Job {
    fn is_rollout_class(&self) -> bool {
        matches!(self, Job::EnvBatch { .. } | Job::Inference { .. })
    }
}

struct DeviceSim {
    queue: VecDeque<(Job, f64)>,
    current: Option<(Job, f64)>,
    last_class: Option<bool>,
}

impl DeviceSim {
    fn new() -> Self {
        DeviceSim { queue: VecDeque::new(), current: None, last_class: None }
    }

    fn is_busy(&self) -> bool {
        self.current.is_some()
    }
}

#[derive(Debug, PartialEq)]
enum RoundPhase {
    Micros,
    Aggregating,
    Syncing,
}

struct RoundRun {
    round: usize,
    next_micro: usize,
    micros_done: usize,
    k_micro: usize,
    agg_done: usize,
    sync_done: usize,
    phase: RoundPhase,
}

struct ActorSim {
    plan: RoundPlan,
    board: SnapshotBoard,
    arrivals: usize,
    samples_arrived: usize,
    rounds_done: usize,
    current: Option<RoundRun>,
    rng: ChaCha8Rng,
    /// (pinned_version, env_id) per arrival rank.
    arrival_log: Vec<(u64, usize)>,
}

struct Sim<'a> {
    cfg: &'a PipelineConfig,
    placement: &'a PlacementPlan,
    workload: &'a WorkloadSpec,
    seed: u64,
    fingerprint: String,

    clock: f64,
    seq: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,

    envs: Vec<EnvSim>,
    workers: Vec<WorkerSim>,
    devices: Vec<DeviceSim>,
    actor: ActorSim,
    gate: StalenessGate,

    queue_occupancy: usize,
    released_ranks: usize,
    queue_waiters: VecDeque<usize>,
    gate_waiters: VecDeque<usize>,

    /// Sync-mode barrier: arrivals counted within the current epoch.
    barrier_arrived: usize,
    training_open: bool,

    /// Env-step phases requested during the current event, grouped afterward.
    step_requests: Vec<usize>,

    events: Vec<TraceEvent>,
    stats: TraceStats,
}

impl<'a> Sim<'a> {
    fn new(
        cfg: &'a PipelineConfig,
        placement: &'a PlacementPlan,
        workload: &'a WorkloadSpec,
        seed: u64,
        fingerprint: &str,
    ) -> Self {
        let round_plan = RoundPlan::new(cfg);
        let n_workers = placement.rollout_devices.len();
        let n_act = placement.actor_devices.len();

        // Contiguous env partition: worker w owns base + (w < rem) envs.
        let base = cfg.n_env / n_workers;
        let rem = cfg.n_env % n_workers;
        let mut workers = Vec::with_capacity(n_workers);
        let mut next_env = 0usize;
        for w in 0..n_workers {
            let count = base + usize::from(w < rem);
            let envs: Vec<usize> = (next_env..next_env + count).collect();
            next_env += count;
            let env_device = if placement.strategy == Strategy::Hybrid {
                placement.actor_devices[w % n_act]
            } else {
                placement.rollout_devices[w]
            };
            workers.push(WorkerSim {
                device: placement.rollout_devices[w],
                env_device,
                trigger: cfg.effective_trigger(envs.len()),
                envs,
                batcher: DynamicBatcher::new(),
                timer_generation: 0,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "worker", w as u64)),
            });
        }

        let envs: Vec<EnvSim> = (0..cfg.n_env)
            .map(|e| EnvSim {
                worker: workers.iter().position(|w| w.envs.contains(&e)).unwrap(),
                episodes_started: 0,
                episode: None,
                status: EnvStatus::Done,
                pending_traj: None,
                step_start_ms: 0.0,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "env", e as u64)),
            })
            .collect();

        Sim {
            cfg,
            placement,
            workload,
            seed,
            fingerprint: fingerprint.to_string(),
            clock: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            envs,
            workers,
            devices: (0..placement.n_devices).map(|_| DeviceSim::new()).collect(),
            actor: ActorSim {
                plan: round_plan,
                board: SnapshotBoard::new(PolicySnapshot::initial(Vec::new())),
                arrivals: 0,
                samples_arrived: 0,
                rounds_done: 0,
                current: None,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "actor", 0)),
                arrival_log: Vec::new(),
            },
            gate: StalenessGate::new(
                cfg.train_async,
                round_plan.trajectories_per_round,
                cfg.max_staleness,
            ),
            queue_occupancy: 0,
            released_ranks: 0,
            queue_waiters: VecDeque::new(),
            gate_waiters: VecDeque::new(),
            barrier_arrived: 0,
            training_open: false,
            step_requests: Vec::new(),
            events: Vec::new(),
            stats: TraceStats::default(),
        }
    }

    // ------------------------------------------------------------------
    // Scheduling primitives
    // ------------------------------------------------------------------

    fn schedule(&mut self, delay_ms: f64, ev: Ev) {
        debug_assert!(delay_ms >= 0.0 && delay_ms.is_finite());
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Scheduled { time: self.clock + delay_ms, seq, ev }));
    }

    fn emit(&mut self, worker: WorkerRef, device: Option<u32>, phase: Phase, start: f64, meta: EventMeta) {
        self.events.push(TraceEvent { worker, device, phase, start_ms: start, end_ms: self.clock, meta });
    }

    // ------------------------------------------------------------------
    // Startup and main loop
    // ------------------------------------------------------------------

    fn start(&mut self) {
        for env in 0..self.cfg.n_env {
            self.try_start_env(env);
        }
        self.flush_env_steps();
        self.pump_actor();
    }

    fn run(&mut self) -> Result<(), EngineError> {
        while !self.is_done() {
            let Some(Reverse(next)) = self.heap.pop() else {
                return Err(EngineError::Deadlock { blocked: self.blocked_summary() });
            };
            if next.time > self.cfg.starvation_timeout_ms {
                return Err(EngineError::Starvation {
                    worker: self.blocked_summary().first().cloned().unwrap_or_else(|| "run".into()),
                    timeout_ms: self.cfg.starvation_timeout_ms,
                });
            }
            debug_assert!(next.time >= self.clock);
            self.clock = next.time;
            self.handle(next.ev);
            self.flush_env_steps();
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.actor.rounds_done == self.actor.plan.n_rounds
            && self.envs.iter().all(|e| e.status == EnvStatus::Done)
    }

    fn blocked_summary(&self) -> Vec<String> {
        let mut blocked = Vec::new();
        for (i, env) in self.envs.iter().enumerate() {
            match env.status {
                EnvStatus::Done => {}
                ref s => blocked.push(format!("env/{i}: {s:?}")),
            }
        }
        if self.actor.rounds_done < self.actor.plan.n_rounds {
            blocked.push(format!(
                "actor: round {}/{} (arrivals {})",
                self.actor.rounds_done, self.actor.plan.n_rounds, self.actor.arrivals
            ));
        }
        blocked
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::EnvStepDone { env } => self.on_env_step_done(env),
            Ev::DeviceJobDone { device } => self.on_device_job_done(device),
            Ev::BatchTimer { worker, generation } => {
                if generation == self.workers[worker].batcher.anchor_generation() {
                    self.try_dispatch(worker);
                }
            }
            Ev::TrajectoryArrived { env } => self.on_trajectory_arrived(env),
        }
    }

    // ------------------------------------------------------------------
    // Env lifecycle
    // ------------------------------------------------------------------

    fn try_start_env(&mut self, env: usize) {
        if self.envs[env].episodes_started >= self.cfg.n_rollout_epochs {
            self.envs[env].status = EnvStatus::Done;
            return;
        }
        let version = self.actor.board.version();
        if !self.gate.may_start(version) {
            self.envs[env].status = EnvStatus::GateWait;
            self.gate_waiters.push_back(env);
            return;
        }
        self.start_episode(env, version);
    }

    fn start_episode(&mut self, env: usize, pin: u64) {
        self.gate.on_start(pin);
        let e = &mut self.envs[env];
        e.episodes_started += 1;
        e.episode = Some(EnvEpisode::new(
            env,
            self.cfg.episode_steps,
            self.cfg.chunk_size,
            pin,
            false,
        ));
        e.status = EnvStatus::Stepping;
        self.step_requests.push(env);
    }

    /// Groups same-instant env-step requests per worker and dispatches them.
    fn flush_env_steps(&mut self) {
        if self.step_requests.is_empty() {
            return;
        }
        let requests = std::mem::take(&mut self.step_requests);
        if self.workload.env_step.is_batched_env() {
            let mut per_worker: Vec<Vec<usize>> = vec![Vec::new(); self.workers.len()];
            for env in requests {
                per_worker[self.envs[env].worker].push(env);
            }
            for (w, group) in per_worker.into_iter().enumerate() {
                if group.is_empty() {
                    continue;
                }
                for &env in &group {
                    self.envs[env].status = EnvStatus::Stepping;
                }
                let device = self.workers[w].env_device;
                let dur = sample_latency(&self.workload.env_step, group.len(), &mut self.workers[w].rng);
                self.enqueue_job(device, Job::EnvBatch { worker: w, envs: group }, dur);
            }
        } else {
            for env in requests {
                let factor = self.workload.straggler_factor(env);
                let dur = sample_latency(&self.workload.env_step, 1, &mut self.envs[env].rng) * factor;
                self.envs[env].status = EnvStatus::Stepping;
                self.envs[env].step_start_ms = self.clock;
                self.schedule(dur, Ev::EnvStepDone { env });
            }
        }
    }

    fn on_env_step_done(&mut self, env: usize) {
        let start = self.envs[env].step_start_ms;
        self.emit(WorkerRef::Env(env as u32), None, Phase::EnvStep, start, EventMeta::default());
        self.observation_ready(env);
        let w = self.envs[env].worker;
        self.try_dispatch(w);
    }

    fn observation_ready(&mut self, env: usize) {
        let episode = self.envs[env].episode.as_mut().expect("episode active");
        let req = episode.observation_ready(None, self.clock).expect("env was stepping");
        self.envs[env].status = EnvStatus::AwaitingActions;
        let w = self.envs[env].worker;
        self.workers[w].batcher.offer(req, self.clock);
    }

    // ------------------------------------------------------------------
    // Device job queueing
    // ------------------------------------------------------------------

    fn enqueue_job(&mut self, device: u32, job: Job, dur: f64) {
        self.devices[device as usize].queue.push_back((job, dur));
        self.maybe_start_job(device);
    }

    fn maybe_start_job(&mut self, device: u32) {
        let dev = &mut self.devices[device as usize];
        if dev.is_busy() || dev.queue.is_empty() {
            return;
        }
        let (job, dur) = dev.queue.pop_front().unwrap();
        let class = job.is_rollout_class();
        // Colocated context switch: charge a gap when the device flips
        // between rollout-side and actor-side work.
        let switch = match dev.last_class {
            Some(prev) if prev != class => self.cfg.context_switch_ms,
            _ => 0.0,
        };
        dev.last_class = Some(class);
        let start = self.clock + switch;
        dev.current = Some((job, start));
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Scheduled {
            time: start + dur,
            seq,
            ev: Ev::DeviceJobDone { device },
        }));
    }

    fn on_device_job_done(&mut self, device: u32) {
        let (job, start) = self.devices[device as usize].current.take().expect("job running");
        match job {
            Job::EnvBatch { worker, envs } => {
                self.emit(
                    WorkerRef::Rollout(worker as u32),
                    Some(device),
                    Phase::EnvStep,
                    start,
                    EventMeta { group: Some(envs.len() as u32), ..Default::default() },
                );
                for env in envs {
                    self.observation_ready(env);
                }
                self.maybe_start_job(device);
                self.try_dispatch(worker);
            }
            Job::Inference { worker, batch } => {
                let versions = batch.iter().map(|&(_, v)| v);
                let (vmin, vmax) = versions.clone().fold((u64::MAX, 0), |(lo, hi), v| (lo.min(v), hi.max(v)));
                self.emit(
                    WorkerRef::Rollout(worker as u32),
                    Some(device),
                    Phase::Inference,
                    start,
                    EventMeta {
                        batch: Some(batch.len() as u32),
                        version: Some(vmax),
                        group: (vmin != vmax).then_some(vmin as u32),
                        ..Default::default()
                    },
                );
                for (env, serving) in batch {
                    self.deliver_actions(env, serving);
                }
                self.maybe_start_job(device);
                self.try_dispatch(worker);
            }
            Job::TrainMicro { lane, round } => {
                self.emit(
                    WorkerRef::Actor(lane),
                    Some(device),
                    Phase::TrainMicro,
                    start,
                    EventMeta { round: Some(round as u32), ..Default::default() },
                );
                let rr = self.actor.current.as_mut().expect("round active");
                rr.micros_done += 1;
                if rr.micros_done == rr.k_micro && rr.phase == RoundPhase::Micros {
                    rr.phase = RoundPhase::Aggregating;
                    let r = rr.round;
                    self.start_actor_phase(r, Phase::GradAggregate);
                }
                self.maybe_start_job(device);
                self.pump_actor();
            }
            Job::GradAggregate { lane, round } => {
                self.emit(
                    WorkerRef::Actor(lane),
                    Some(device),
                    Phase::GradAggregate,
                    start,
                    EventMeta { round: Some(round as u32), ..Default::default() },
                );
                let rr = self.actor.current.as_mut().expect("round active");
                rr.agg_done += 1;
                if rr.agg_done == self.placement.actor_devices.len() {
                    rr.phase = RoundPhase::Syncing;
                    self.start_actor_phase(round, Phase::WeightSync);
                }
                self.maybe_start_job(device);
            }
            Job::WeightSync { lane, round } => {
                let version = self.actor.board.version() + 1;
                self.emit(
                    WorkerRef::Actor(lane),
                    Some(device),
                    Phase::WeightSync,
                    start,
                    EventMeta { round: Some(round as u32), version: Some(version), ..Default::default() },
                );
                let rr = self.actor.current.as_mut().expect("round active");
                rr.sync_done += 1;
                if rr.sync_done == self.placement.actor_devices.len() {
                    self.complete_round();
                }
                self.maybe_start_job(device);
            }
        }
    }

    // ------------------------------------------------------------------
    // Inference dispatch
    // ------------------------------------------------------------------

    fn try_dispatch(&mut self, worker: usize) {
        let device = self.workers[worker].device;
        if !self.devices[device as usize].is_busy() {
            let trigger = self.workers[worker].trigger;
            let now = self.clock;
            if let Some(batch) = self.workers[worker].batcher.poll(now, trigger) {
                let adopt = self.cfg.mid_episode_adoption;
                let current = self.actor.board.version();
                let entries: Vec<(usize, u64)> = batch
                    .iter()
                    .map(|req| {
                        let serving = if adopt {
                            current
                        } else {
                            self.envs[req.env_id].episode.as_ref().unwrap().pinned_version()
                        };
                        (req.env_id, serving)
                    })
                    .collect();
                let dur =
                    sample_latency(&self.workload.inference, entries.len(), &mut self.workers[worker].rng);
                self.enqueue_job(device, Job::Inference { worker, batch: entries }, dur);
            }
        }
        self.update_timer(worker);
    }

    fn update_timer(&mut self, worker: usize) {
        let w = &self.workers[worker];
        if let Some(deadline) = w.batcher.deadline(w.trigger) {
            let generation = w.batcher.anchor_generation();
            if generation != w.timer_generation && deadline > self.clock {
                self.workers[worker].timer_generation = generation;
                let delay = deadline - self.clock;
                self.schedule(delay, Ev::BatchTimer { worker, generation });
            }
        }
    }

    fn deliver_actions(&mut self, env: usize, serving_version: u64) {
        let episode = self.envs[env].episode.as_mut().expect("episode active");
        let steps = episode.chunk_steps(episode.next_chunk());
        self.stats.env_steps_total += steps as u64;
        match episode.actions_received(serving_version, &[], self.clock).expect("awaiting actions") {
            EnvStepOutcome::NeedsStep => {
                self.step_requests.push(env);
            }
            EnvStepOutcome::Completed(traj) => {
                self.envs[env].episode = None;
                self.stats.produced_trajectories += 1;
                self.try_push(env, traj);
            }
        }
    }

    // ------------------------------------------------------------------
    // Trajectory queue (capacity + transfer cost)
    // ------------------------------------------------------------------

    fn try_push(&mut self, env: usize, traj: Trajectory) {
        if let Some(cap) = self.cfg.queue_capacity {
            if self.queue_occupancy >= cap {
                self.envs[env].status = EnvStatus::QueueBlocked { since_ms: self.clock };
                self.envs[env].pending_traj = Some(traj);
                self.queue_waiters.push_back(env);
                return;
            }
        }
        self.begin_push(env, traj);
    }

    fn begin_push(&mut self, env: usize, traj: Trajectory) {
        self.queue_occupancy += 1;
        let comm = self.workload.comm_per_trajectory_at(self.cfg.nodes);
        if comm > 0.0 {
            let start = self.clock;
            let end = self.clock + comm;
            self.events.push(TraceEvent {
                worker: WorkerRef::Env(env as u32),
                device: None,
                phase: Phase::QueueWait,
                start_ms: start,
                end_ms: end,
                meta: EventMeta::default(),
            });
        }
        self.envs[env].status = EnvStatus::Pushing;
        self.envs[env].pending_traj = Some(traj);
        self.schedule(comm, Ev::TrajectoryArrived { env });
    }

    fn wake_queue_waiters(&mut self) {
        while let Some(&env) = self.queue_waiters.front() {
            let cap = self.cfg.queue_capacity.expect("waiters imply bounded queue");
            if self.queue_occupancy >= cap {
                break;
            }
            self.queue_waiters.pop_front();
            if let EnvStatus::QueueBlocked { since_ms } = self.envs[env].status {
                self.events.push(TraceEvent {
                    worker: WorkerRef::Env(env as u32),
                    device: None,
                    phase: Phase::QueueWait,
                    start_ms: since_ms,
                    end_ms: self.clock,
                    meta: EventMeta { blocked: true, ..Default::default() },
                });
            }
            let traj = self.envs[env].pending_traj.take().expect("blocked trajectory");
            self.begin_push(env, traj);
        }
    }

    fn on_trajectory_arrived(&mut self, env: usize) {
        let traj = self.envs[env].pending_traj.take().expect("pushed trajectory");
        let pin = traj.policy_version;
        self.actor.arrival_log.push((pin, env));
        self.actor.arrivals += 1;
        self.actor.samples_arrived += self.actor.plan.samples_per_trajectory;
        self.gate.on_arrival(pin);
        self.wake_gate_waiters();
        self.maybe_release_ranks();
        self.pump_actor();

        if self.cfg.train_async {
            self.try_start_env(env);
        } else {
            self.barrier_arrived += 1;
            self.envs[env].status = EnvStatus::BarrierWait;
            if self.barrier_arrived == self.cfg.n_env {
                self.training_open = true;
                self.pump_actor();
            }
        }
        self.check_barrier_release();
    }

    /// Removes trajectories from the queue once the actor collects them:
    /// in micro-batch chunks as they arrive with the streamer, or when the
    /// active round's batch is complete without it.
    fn maybe_release_ranks(&mut self) {
        let Some(rr) = &self.actor.current else { return };
        let plan = &self.actor.plan;
        let end = plan.round_end(rr.round);
        let target = if self.cfg.streamer.enabled {
            self.actor.arrivals.min(end)
        } else if self.actor.arrivals >= end {
            end
        } else {
            self.released_ranks
        };
        if target > self.released_ranks {
            self.queue_occupancy -= target - self.released_ranks;
            self.released_ranks = target;
            self.wake_queue_waiters();
        }
    }

    fn wake_gate_waiters(&mut self) {
        while let Some(&env) = self.gate_waiters.front() {
            if !self.gate.may_start(self.actor.board.version()) {
                break;
            }
            self.gate_waiters.pop_front();
            let version = self.actor.board.version();
            self.start_episode(env, version);
        }
    }

    // ------------------------------------------------------------------
    // Actor
    // ------------------------------------------------------------------

    fn pump_actor(&mut self) {
        // Activate the next round when the previous one has fully synced. In
        // sync mode a round additionally waits for the training phase to be
        // open and for its batch to be fully collected; in async mode it may
        // activate early so streamer micro-steps can overlap arrivals.
        if self.actor.current.is_none() && self.actor.rounds_done < self.actor.plan.n_rounds {
            let round = self.actor.rounds_done;
            let can_activate = if self.cfg.train_async {
                true
            } else {
                self.training_open && self.actor.arrivals >= self.actor.plan.round_end(round)
            };
            if !can_activate {
                return;
            }
            self.actor.current = Some(RoundRun {
                round,
                next_micro: 0,
                micros_done: 0,
                k_micro: self.actor.plan.micro_steps(round),
                agg_done: 0,
                sync_done: 0,
                phase: RoundPhase::Micros,
            });
            self.maybe_release_ranks();
        }
        let Some(rr) = &self.actor.current else { return };
        if rr.phase != RoundPhase::Micros {
            return;
        }
        let round = rr.round;
        let streamer = self.cfg.streamer.enabled;
        loop {
            let rr = self.actor.current.as_ref().unwrap();
            if rr.next_micro >= rr.k_micro {
                break;
            }
            let needed = self.actor.plan.micro_ready_samples(round, rr.next_micro, streamer);
            if self.actor.samples_arrived < needed {
                break;
            }
            let Some(&device) = self
                .placement
                .actor_devices
                .iter()
                .find(|&&d| !self.devices[d as usize].is_busy())
            else {
                break;
            };
            let micro = rr.next_micro;
            let size = self.actor.plan.micro_size(round, micro);
            let dur = sample_latency(&self.workload.train_microbatch, size, &mut self.actor.rng);
            self.actor.current.as_mut().unwrap().next_micro += 1;
            let lane = self
                .placement
                .actor_devices
                .iter()
                .position(|&d| d == device)
                .unwrap() as u32;
            self.enqueue_job(device, Job::TrainMicro { lane, round }, dur);
        }
    }

    fn start_actor_phase(&mut self, round: usize, phase: Phase) {
        let dur = match phase {
            Phase::GradAggregate => self.workload.grad_aggregate_ms,
            Phase::WeightSync => self.workload.weight_sync_ms,
            _ => unreachable!(),
        };
        for (lane, &device) in self.placement.actor_devices.clone().iter().enumerate() {
            let job = match phase {
                Phase::GradAggregate => Job::GradAggregate { lane: lane as u32, round },
                _ => Job::WeightSync { lane: lane as u32, round },
            };
            self.enqueue_job(device, job, dur);
        }
    }

    fn complete_round(&mut self) {
        let rr = self.actor.current.take().expect("round active");
        let round = rr.round;
        let consuming_version = self.actor.board.version();
        debug_assert_eq!(consuming_version, round as u64);
        let start = round * self.actor.plan.trajectories_per_round;
        let end = self.actor.plan.round_end(round);
        for rank in start..end {
            let (pin, env_id) = self.actor.arrival_log[rank];
            self.stats.consumptions.push(Consumption {
                arrival_rank: rank,
                round,
                consuming_version,
                pinned_version: pin,
                env_id,
            });
        }
        self.stats.consumed_trajectories += end - start;
        self.actor
            .board
            .publish(PolicySnapshot { version: consuming_version + 1, weights: Vec::new() })
            .expect("monotone publish");
        self.stats.versions_published += 1;
        self.actor.rounds_done += 1;
        self.wake_gate_waiters();
        self.pump_actor();
        self.check_barrier_release();
    }

    fn check_barrier_release(&mut self) {
        if self.cfg.train_async || !self.training_open {
            return;
        }
        // Training phase ends once every round with complete data has run.
        let available = self.actor.plan.rounds_available(self.actor.arrivals);
        if self.actor.rounds_done < available || self.actor.current.is_some() {
            return;
        }
        self.training_open = false;
        self.barrier_arrived = 0;
        let waiting: Vec<usize> = self
            .envs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.status == EnvStatus::BarrierWait)
            .map(|(i, _)| i)
            .collect();
        for env in waiting {
            self.try_start_env(env);
        }
    }

    // ------------------------------------------------------------------
    // Output
    // ------------------------------------------------------------------

    fn into_trace(self) -> Trace {
        let mut trace = Trace {
            config_fingerprint: self.fingerprint,
            seed: self.seed,
            dims: RunDims {
                n_devices: self.placement.n_devices,
                rollout_devices: self.placement.rollout_devices.clone(),
                actor_devices: self.placement.actor_devices.clone(),
                n_env: self.cfg.n_env,
                rollout_epochs: self.cfg.n_rollout_epochs,
                episode_steps: self.cfg.episode_steps,
            },
            stats: self.stats,
            events: self.events,
        };
        trace.finalize();
        trace
    }
}
