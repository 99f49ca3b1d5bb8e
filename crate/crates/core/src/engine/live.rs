//! Live concurrent engine: one thread per env instance, one per rollout
//! worker, one actor thread. Modeled durations become real sleeps scaled by
//! `time_scale`; the learner is the real bandit policy, so weight trajectories
//! are genuine. Event ordering is wall-clock nondeterministic, but all
//! pipeline invariants (staleness, conservation, FIFO) must hold on every
//! run.

use super::{
    derive_seed, Consumption, EngineError, EventMeta, Phase, RunDims, Trace, TraceEvent,
    TraceStats, WorkerRef,
};
use crate::pipeline::batcher::TriggerConfig;
use crate::pipeline::{
    DynamicBatcher, EnvEpisode, EnvStepOutcome, PipelineConfig, PolicySnapshot, RoundPlan,
    StalenessGate, StepRecord, Trajectory, TrajectoryRecords,
};
use crate::toyrl::{
    accumulate_gradient, apply_update, compute_gradient, policy_act, success_rate, BanditEnv,
    GradSample, LinearPolicy,
};
use crate::workload::{sample_latency, PlacementPlan, WorkloadSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Learner hyperparameters for live runs.
#[derive(Debug, Clone)]
pub struct ToyParams {
    pub n_arms: usize,
    pub learning_rate: f64,
}

/// One point of the success-rate curve: exact rate after each update.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SuccessPoint {
    pub update_index: usize,
    pub success_rate: f64,
    pub policy_version: u64,
}

pub struct LiveRunResult {
    pub trace: Trace,
    pub final_weights: Vec<f64>,
    pub success_curve: Vec<SuccessPoint>,
}

struct TimeBase {
    t0: Instant,
    /// Real ms per virtual ms.
    scale: f64,
}

impl TimeBase {
    fn now_ms(&self) -> f64 {
        self.t0.elapsed().as_secs_f64() * 1000.0 / self.scale
    }

    fn sleep(&self, virtual_ms: f64) {
        if virtual_ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(virtual_ms * self.scale / 1000.0));
        }
    }

    fn real_timeout(&self, virtual_ms: f64) -> Duration {
        Duration::from_secs_f64((virtual_ms * self.scale / 1000.0).max(0.001))
    }
}

struct Coord {
    snapshot: Arc<PolicySnapshot>,
    gate: StalenessGate,
    queue: VecDeque<Trajectory>,
    /// Pushes in transfer (sleeping on comm) that already hold a queue slot.
    inflight: usize,
    arrivals: usize,
    samples_arrived: usize,
    barrier_arrived: usize,
    epochs_released: u32,
    produced: usize,
    env_steps_total: u64,
    shutdown: Option<String>,
}

struct Shared {
    cfg: PipelineConfig,
    plan: RoundPlan,
    workload: WorkloadSpec,
    bandit: BanditEnv,
    time: TimeBase,
    coord: Mutex<Coord>,
    changed: Condvar,
    events: Mutex<Vec<TraceEvent>>,
}

impl Shared {
    fn record(&self, event: TraceEvent) {
        self.events.lock().unwrap().push(event);
    }

    fn poison(&self, who: &str) -> EngineError {
        let mut coord = self.coord.lock().unwrap();
        if coord.shutdown.is_none() {
            coord.shutdown = Some(who.to_string());
        }
        self.changed.notify_all();
        EngineError::Starvation { worker: who.to_string(), timeout_ms: self.cfg.starvation_timeout_ms }
    }

    /// Waits under the coord lock until `cond` holds; errors on poison or
    /// starvation timeout.
    fn wait_until<F: FnMut(&mut Coord) -> bool>(
        &self,
        who: &str,
        mut cond: F,
    ) -> Result<(), EngineError> {
        let timeout = self.time.real_timeout(self.cfg.starvation_timeout_ms);
        let mut coord = self.coord.lock().unwrap();
        let deadline = Instant::now() + timeout;
        loop {
            if coord.shutdown.is_some() {
                return Err(EngineError::Starvation {
                    worker: who.to_string(),
                    timeout_ms: self.cfg.starvation_timeout_ms,
                });
            }
            if cond(&mut coord) {
                return Ok(());
            }
            let now = Instant::now();
            if now >= deadline {
                drop(coord);
                return Err(self.poison(who));
            }
            let (guard, _) = self.changed.wait_timeout(coord, deadline - now).unwrap();
            coord = guard;
        }
    }
}

struct LiveRequest {
    env_id: usize,
    chunk_index: u32,
    context: usize,
    snapshot: Arc<PolicySnapshot>,
    reply: mpsc::Sender<ChunkReply>,
}

struct ChunkReply {
    version: u64,
    records: Vec<StepRecord>,
}

/// Runs the pipeline on real threads with the bandit learner.
pub fn run_live(
    cfg: &PipelineConfig,
    plan: &PlacementPlan,
    workload: &WorkloadSpec,
    seed: u64,
    config_fingerprint: &str,
    toy: &ToyParams,
    time_scale: f64,
) -> Result<LiveRunResult, EngineError> {
    cfg.validate()?;
    cfg.validate_against_plan(plan)?;
    workload.validate()?;
    if workload.env_step.is_batched_env() {
        return Err(crate::pipeline::PipelineError::InconsistentConfig(
            "live engine supports per-instance env latency models only".into(),
        )
        .into());
    }

    let round_plan = RoundPlan::new(cfg);
    let bandit = BanditEnv::one_hot(toy.n_arms, cfg.episode_steps);
    let initial = PolicySnapshot::initial(vec![0.0; toy.n_arms * toy.n_arms]);
    let shared = Arc::new(Shared {
        cfg: cfg.clone(),
        plan: round_plan,
        workload: workload.clone(),
        bandit,
        time: TimeBase { t0: Instant::now(), scale: time_scale },
        coord: Mutex::new(Coord {
            snapshot: initial,
            gate: StalenessGate::new(
                cfg.train_async,
                round_plan.trajectories_per_round,
                cfg.max_staleness,
            ),
            queue: VecDeque::new(),
            inflight: 0,
            arrivals: 0,
            samples_arrived: 0,
            barrier_arrived: 0,
            epochs_released: 0,
            produced: 0,
            env_steps_total: 0,
            shutdown: None,
        }),
        changed: Condvar::new(),
        events: Mutex::new(Vec::new()),
    });

    let n_workers = plan.rollout_devices.len();
    let base = cfg.n_env / n_workers;
    let rem = cfg.n_env % n_workers;
    let mut worker_of_env = vec![0usize; cfg.n_env];
    {
        let mut next = 0usize;
        for w in 0..n_workers {
            let count = base + usize::from(w < rem);
            for e in next..next + count {
                worker_of_env[e] = w;
            }
            next += count;
        }
    }
    let env_counts: Vec<usize> =
        (0..n_workers).map(|w| worker_of_env.iter().filter(|&&x| x == w).count()).collect();

    let (worker_txs, worker_rxs): (Vec<_>, Vec<_>) =
        (0..n_workers).map(|_| mpsc::channel::<LiveRequest>()).unzip();

    let mut handles: Vec<std::thread::JoinHandle<Result<(), EngineError>>> = Vec::new();

    // Rollout worker threads.
    for (w, rx) in worker_rxs.into_iter().enumerate() {
        let shared = Arc::clone(&shared);
        let device = plan.rollout_devices[w];
        let trigger = cfg.effective_trigger(env_counts[w]);
        let handle = std::thread::Builder::new()
            .name(format!("rollout-{w}"))
            .spawn(move || worker_loop(shared, rx, w, device, trigger, seed))
            .expect("spawn worker");
        handles.push(handle);
    }

    // Env instance threads.
    for env_id in 0..cfg.n_env {
        let shared = Arc::clone(&shared);
        let tx = worker_txs[worker_of_env[env_id]].clone();
        let handle = std::thread::Builder::new()
            .name(format!("env-{env_id}"))
            .spawn(move || env_loop(shared, tx, env_id, seed))
            .expect("spawn env");
        handles.push(handle);
    }
    drop(worker_txs);

    // Actor thread.
    let actor_shared = Arc::clone(&shared);
    let actor_device = plan.actor_devices[0];
    let toy = toy.clone();
    let actor_handle = std::thread::Builder::new()
        .name("actor".into())
        .spawn(move || actor_loop(actor_shared, actor_device, toy, seed))
        .expect("spawn actor");

    let mut first_error: Option<EngineError> = None;
    for handle in handles {
        if let Err(e) = handle.join().expect("worker panicked") {
            first_error.get_or_insert(e);
        }
    }
    let actor_out = match actor_handle.join().expect("actor panicked") {
        Ok(out) => Some(out),
        Err(e) => {
            first_error.get_or_insert(e);
            None
        }
    };
    if let Some(e) = first_error {
        return Err(e);
    }
    let (final_weights, success_curve, consumptions) = actor_out.unwrap();

    let coord = shared.coord.lock().unwrap();
    let stats = TraceStats {
        produced_trajectories: coord.produced,
        consumed_trajectories: consumptions.len(),
        env_steps_total: coord.env_steps_total,
        versions_published: coord.snapshot.version,
        consumptions,
    };
    drop(coord);

    let mut trace = Trace {
        config_fingerprint: config_fingerprint.to_string(),
        seed,
        dims: RunDims {
            n_devices: plan.n_devices,
            rollout_devices: plan.rollout_devices.clone(),
            actor_devices: plan.actor_devices.clone(),
            n_env: cfg.n_env,
            rollout_epochs: cfg.n_rollout_epochs,
            episode_steps: cfg.episode_steps,
        },
        stats,
        events: std::mem::take(&mut *shared.events.lock().unwrap()),
    };
    trace.finalize();
    Ok(LiveRunResult { trace, final_weights, success_curve })
}

fn env_loop(
    shared: Arc<Shared>,
    tx: mpsc::Sender<LiveRequest>,
    env_id: usize,
    seed: u64,
) -> Result<(), EngineError> {
    let cfg = &shared.cfg;
    let me = format!("env-{env_id}");
    let mut rng_env = ChaCha8Rng::seed_from_u64(derive_seed(seed, "env", env_id as u64));
    let mut rng_ctx = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ctx", env_id as u64));
    let (reply_tx, reply_rx) = mpsc::channel::<ChunkReply>();
    let spt = shared.plan.samples_per_trajectory;

    for episode_idx in 0..cfg.n_rollout_epochs {
        if !cfg.train_async {
            shared.wait_until(&me, |c| c.epochs_released >= episode_idx)?;
        }
        // Staleness gate: pin the snapshot current at admission.
        let mut pinned: Option<Arc<PolicySnapshot>> = None;
        shared.wait_until(&me, |c| {
            if c.gate.may_start(c.snapshot.version) {
                c.gate.on_start(c.snapshot.version);
                pinned = Some(Arc::clone(&c.snapshot));
                true
            } else {
                false
            }
        })?;
        let pinned = pinned.unwrap();
        let mut episode =
            EnvEpisode::new(env_id, cfg.episode_steps, cfg.chunk_size, pinned.version, true);
        let mut episode_steps = 0u64;

        let trajectory = loop {
            let dur = sample_latency(&shared.workload.env_step, 1, &mut rng_env)
                * shared.workload.straggler_factor(env_id);
            let start = shared.time.now_ms();
            shared.time.sleep(dur);
            shared.record(TraceEvent {
                worker: WorkerRef::Env(env_id as u32),
                device: None,
                phase: Phase::EnvStep,
                start_ms: start,
                end_ms: shared.time.now_ms(),
                meta: EventMeta::default(),
            });
            let context = shared.bandit.sample_context(&mut rng_ctx);
            let req = episode
                .observation_ready(Some(context), shared.time.now_ms())
                .map_err(EngineError::Pipeline)?;
            tx.send(LiveRequest {
                env_id,
                chunk_index: req.chunk_index,
                context,
                snapshot: Arc::clone(&pinned),
                reply: reply_tx.clone(),
            })
            .map_err(|_| shared.poison(&me))?;
            let reply = reply_rx
                .recv_timeout(shared.time.real_timeout(cfg.starvation_timeout_ms))
                .map_err(|_| shared.poison(&me))?;
            episode_steps += reply.records.len() as u64;
            match episode
                .actions_received(reply.version, &reply.records, shared.time.now_ms())
                .map_err(EngineError::Pipeline)?
            {
                EnvStepOutcome::NeedsStep => {}
                EnvStepOutcome::Completed(traj) => break traj,
            }
        };

        // Capacity wait, then transfer, then arrival.
        let block_start = shared.time.now_ms();
        let was_full = {
            let mut coord = shared.coord.lock().unwrap();
            coord.produced += 1;
            coord.env_steps_total += episode_steps;
            match cfg.queue_capacity {
                Some(cap) => coord.queue.len() + coord.inflight >= cap,
                None => false,
            }
        };
        shared.wait_until(&me, |c| {
            let ok = match cfg.queue_capacity {
                Some(cap) => c.queue.len() + c.inflight < cap,
                None => true,
            };
            if ok {
                c.inflight += 1;
            }
            ok
        })?;
        if was_full {
            shared.record(TraceEvent {
                worker: WorkerRef::Env(env_id as u32),
                device: None,
                phase: Phase::QueueWait,
                start_ms: block_start,
                end_ms: shared.time.now_ms(),
                meta: EventMeta { blocked: true, ..Default::default() },
            });
        }
        let comm = shared.workload.comm_per_trajectory_at(cfg.nodes);
        if comm > 0.0 {
            let start = shared.time.now_ms();
            shared.time.sleep(comm);
            shared.record(TraceEvent {
                worker: WorkerRef::Env(env_id as u32),
                device: None,
                phase: Phase::QueueWait,
                start_ms: start,
                end_ms: shared.time.now_ms(),
                meta: EventMeta::default(),
            });
        }
        {
            let mut coord = shared.coord.lock().unwrap();
            coord.inflight -= 1;
            let pin = trajectory.policy_version;
            coord.queue.push_back(trajectory);
            coord.arrivals += 1;
            coord.samples_arrived += spt;
            coord.gate.on_arrival(pin);
            if !cfg.train_async {
                coord.barrier_arrived += 1;
            }
            shared.changed.notify_all();
        }
    }
    Ok(())
}

fn worker_loop(
    shared: Arc<Shared>,
    rx: mpsc::Receiver<LiveRequest>,
    worker: usize,
    device: u32,
    trigger: TriggerConfig,
    seed: u64,
) -> Result<(), EngineError> {
    let me = format!("rollout-{worker}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "policy", worker as u64));
    let mut rng_lat = ChaCha8Rng::seed_from_u64(derive_seed(seed, "worker", worker as u64));
    let mut batcher = DynamicBatcher::new();
    let mut by_env: std::collections::HashMap<usize, LiveRequest> = Default::default();
    let mut open = true;

    loop {
        // Serve every batch the trigger currently allows.
        while let Some(batch) = batcher.poll(shared.time.now_ms(), trigger) {
            let dur = sample_latency(&shared.workload.inference, batch.len(), &mut rng_lat);
            let start = shared.time.now_ms();
            shared.time.sleep(dur);
            let mut version_max = 0u64;
            let mut replies = Vec::with_capacity(batch.len());
            for req in &batch {
                let live = by_env.remove(&req.env_id).expect("request bookkeeping");
                let serving = if shared.cfg.mid_episode_adoption {
                    shared.coord.lock().unwrap().snapshot.clone()
                } else {
                    Arc::clone(&live.snapshot)
                };
                version_max = version_max.max(serving.version);
                let policy = LinearPolicy::from_weights(
                    shared.bandit.n_arms,
                    shared.bandit.context_dim,
                    serving.weights.clone(),
                )
                .expect("snapshot dims");
                let x = &shared.bandit.contexts[live.context];
                let (action, log_prob) = policy_act(&policy, x, &mut rng);
                let reward = shared.bandit.reward(live.context, action);
                let steps = shared
                    .cfg
                    .chunk_size
                    .min(shared.cfg.episode_steps - live.chunk_index * shared.cfg.chunk_size);
                let records = (0..steps)
                    .map(|_| StepRecord {
                        context: live.context,
                        action,
                        reward,
                        log_prob,
                        policy_version: serving.version,
                    })
                    .collect();
                replies.push((live.reply, ChunkReply { version: serving.version, records }));
            }
            shared.record(TraceEvent {
                worker: WorkerRef::Rollout(worker as u32),
                device: Some(device),
                phase: Phase::Inference,
                start_ms: start,
                end_ms: shared.time.now_ms(),
                meta: EventMeta {
                    batch: Some(batch.len() as u32),
                    version: Some(version_max),
                    ..Default::default()
                },
            });
            for (reply, chunk) in replies {
                let _ = reply.send(chunk);
            }
        }

        if !open && batcher.pending_len() == 0 {
            return Ok(());
        }

        // Wait for the next request or the batch deadline.
        let wait = match batcher.deadline(trigger) {
            Some(deadline) => {
                let virtual_left = (deadline - shared.time.now_ms()).max(0.0);
                shared.time.real_timeout(virtual_left.min(shared.cfg.starvation_timeout_ms))
            }
            None => shared.time.real_timeout(shared.cfg.starvation_timeout_ms),
        };
        let first = if open {
            match rx.recv_timeout(wait) {
                Ok(msg) => Some(msg),
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    if batcher.deadline(trigger).is_none() {
                        // Waited the full starvation window with no trigger armed.
                        return Err(shared.poison(&me));
                    }
                    None
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    open = false;
                    None
                }
            }
        } else if batcher.deadline(trigger).is_some() {
            // Channel closed but a partial batch is still waiting out t_max.
            std::thread::sleep(wait.min(Duration::from_millis(5)));
            None
        } else {
            return Err(shared.poison(&me));
        };
        if shared.coord.lock().unwrap().shutdown.is_some() {
            return Ok(());
        }
        for msg in first.into_iter().chain(rx.try_iter()) {
            let req = crate::pipeline::InferenceRequest {
                env_id: msg.env_id,
                chunk_index: msg.chunk_index,
                context: Some(msg.context),
                enqueue_time_ms: shared.time.now_ms(),
            };
            by_env.insert(msg.env_id, msg);
            batcher.offer(req, shared.time.now_ms());
        }
    }
}

type ActorOutput = (Vec<f64>, Vec<SuccessPoint>, Vec<Consumption>);

fn actor_loop(
    shared: Arc<Shared>,
    device: u32,
    toy: ToyParams,
    seed: u64,
) -> Result<ActorOutput, EngineError> {
    let cfg = &shared.cfg;
    let plan = shared.plan;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "actor", 0));
    let mut policy = LinearPolicy::zeros(toy.n_arms, toy.n_arms);
    let mut curve = Vec::with_capacity(plan.n_rounds);
    let mut consumptions = Vec::with_capacity(plan.total_trajectories);
    let mut next_rank = 0usize;
    let streamer = cfg.streamer.enabled;

    for round in 0..plan.n_rounds {
        if !cfg.train_async {
            // Training phase opens when every env of the epoch has arrived.
            shared.wait_until("actor", |c| {
                c.barrier_arrived == cfg.n_env && c.arrivals >= plan.round_end(round)
            })?;
        }
        let round_samples = plan.round_samples(round);
        let k_micro = plan.micro_steps(round);
        let mut grad_acc = vec![0.0; policy.w.len()];
        let mut samples: Vec<GradSample> = Vec::with_capacity(round_samples);
        let mut consumed_this_round = 0usize;

        for j in 0..k_micro {
            let needed = plan.micro_ready_samples(round, j, streamer);
            shared.wait_until("actor", |c| c.samples_arrived >= needed)?;
            // Pop trajectories covering this micro-step, in arrival order.
            let target = (j * plan.micro_batch + plan.micro_size(round, j)).min(round_samples);
            while samples.len() < target {
                let traj = {
                    let mut coord = shared.coord.lock().unwrap();
                    let traj = coord.queue.pop_front().expect("arrived trajectory");
                    shared.changed.notify_all();
                    traj
                };
                let TrajectoryRecords::Live(records) = &traj.records else {
                    unreachable!("live trajectories carry records")
                };
                for chunk in records.chunks(cfg.chunk_size as usize) {
                    let first = &chunk[0];
                    samples.push(GradSample {
                        context: first.context,
                        action: first.action,
                        reward: first.reward,
                        log_prob: first.log_prob,
                    });
                }
                consumptions.push(Consumption {
                    arrival_rank: next_rank,
                    round,
                    consuming_version: round as u64,
                    pinned_version: traj.policy_version,
                    env_id: traj.env_id,
                });
                next_rank += 1;
                consumed_this_round += 1;
            }
            let lo = j * plan.micro_batch;
            let hi = (lo + plan.micro_size(round, j)).min(samples.len());
            let slice = &samples[lo..hi];
            let dur = sample_latency(&shared.workload.train_microbatch, slice.len(), &mut rng);
            let start = shared.time.now_ms();
            shared.time.sleep(dur);
            shared.record(TraceEvent {
                worker: WorkerRef::Actor(0),
                device: Some(device),
                phase: Phase::TrainMicro,
                start_ms: start,
                end_ms: shared.time.now_ms(),
                meta: EventMeta { round: Some(round as u32), batch: Some(slice.len() as u32), ..Default::default() },
            });
            let grad = compute_gradient(slice, &shared.bandit, &policy)
                .map_err(|e| EngineError::Parse(e.to_string()))?;
            accumulate_gradient(&mut grad_acc, &grad);
        }
        debug_assert_eq!(consumed_this_round, plan.round_size(round));

        let start = shared.time.now_ms();
        shared.time.sleep(shared.workload.grad_aggregate_ms);
        shared.record(TraceEvent {
            worker: WorkerRef::Actor(0),
            device: Some(device),
            phase: Phase::GradAggregate,
            start_ms: start,
            end_ms: shared.time.now_ms(),
            meta: EventMeta { round: Some(round as u32), ..Default::default() },
        });
        policy = apply_update(&policy, &grad_acc, toy.learning_rate, round_samples);

        let start = shared.time.now_ms();
        shared.time.sleep(shared.workload.weight_sync_ms);
        shared.record(TraceEvent {
            worker: WorkerRef::Actor(0),
            device: Some(device),
            phase: Phase::WeightSync,
            start_ms: start,
            end_ms: shared.time.now_ms(),
            meta: EventMeta {
                round: Some(round as u32),
                version: Some(round as u64 + 1),
                ..Default::default()
            },
        });
        curve.push(SuccessPoint {
            update_index: round,
            success_rate: success_rate(&policy, &shared.bandit),
            policy_version: round as u64 + 1,
        });

        {
            let mut coord = shared.coord.lock().unwrap();
            let published = PolicySnapshot { version: round as u64 + 1, weights: policy.w.clone() };
            if published.version != coord.snapshot.version + 1 {
                drop(coord);
                return Err(crate::pipeline::PipelineError::VersionRegression {
                    current: round as u64,
                    attempted: round as u64 + 1,
                }
                .into());
            }
            coord.snapshot = Arc::new(published);
            if !cfg.train_async {
                let available = plan.rounds_available(coord.arrivals);
                if round + 1 >= available {
                    coord.epochs_released += 1;
                    coord.barrier_arrived = 0;
                }
            }
            shared.changed.notify_all();
        }
    }
    Ok((policy.w, curve, consumptions))
}
