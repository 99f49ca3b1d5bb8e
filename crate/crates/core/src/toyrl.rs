//! Minimal fully-verifiable learner for live-mode runs: a contextual bandit
//! with a softmax-linear policy trained by plain policy gradient.
//!
//! Rewards are deterministic and the exact success rate has a closed form,
//! so pipeline-level properties (gradient accumulation equivalence,
//! sync/async parity) are assertable without a real simulator.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ToyRlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Deterministic contextual bandit. Reward is 1 for the optimal arm of the
/// presented context and 0 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditEnv {
    pub context_dim: usize,
    pub n_arms: usize,
    /// Row-major `n_contexts x context_dim` unit vectors.
    pub contexts: Vec<Vec<f64>>,
    pub optimal_arm: Vec<usize>,
    pub episode_steps: u32,
}

impl BanditEnv {
    /// The one-hot preset: `n` contexts = standard basis vectors, arm `i`
    /// optimal for context `i`.
    pub fn one_hot(n: usize, episode_steps: u32) -> Self {
        let contexts = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect();
        BanditEnv {
            context_dim: n,
            n_arms: n,
            contexts,
            optimal_arm: (0..n).collect(),
            episode_steps,
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn sample_context<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.n_contexts())
    }

    pub fn reward(&self, context: usize, action: usize) -> f64 {
        if self.optimal_arm[context] == action {
            1.0
        } else {
            0.0
        }
    }
}

/// Softmax-linear policy over `n_arms` with a row-major `n_arms x dim`
/// weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    pub n_arms: usize,
    pub dim: usize,
    pub w: Vec<f64>,
}

impl LinearPolicy {
    pub fn zeros(n_arms: usize, dim: usize) -> Self {
        LinearPolicy { n_arms, dim, w: vec![0.0; n_arms * dim] }
    }

    pub fn from_weights(n_arms: usize, dim: usize, w: Vec<f64>) -> Result<Self, ToyRlError> {
        if w.len() != n_arms * dim {
            return Err(ToyRlError::DimensionMismatch(format!(
                "weights len {} != {} x {}",
                w.len(),
                n_arms,
                dim
            )));
        }
        Ok(LinearPolicy { n_arms, dim, w })
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_arms)
            .map(|a| {
                let row = &self.w[a * self.dim..(a + 1) * self.dim];
                row.iter().zip(x).map(|(wi, xi)| wi * xi).sum()
            })
            .collect()
    }

    /// Action distribution softmax(W x); sums to 1 within 1e-12.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }
}

/// Samples an action from softmax(W x), consuming exactly one uniform draw,
/// and returns it with its log-probability.
pub fn policy_act<R: Rng>(policy: &LinearPolicy, x: &[f64], rng: &mut R) -> (usize, f64) {
    let probs = policy.probabilities(x);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut action = probs.len() - 1;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            action = a;
            break;
        }
    }
    (action, probs[action].max(f64::MIN_POSITIVE).ln())
}

/// One training sample: a chunked transition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
}

/// REINFORCE gradient `sum_i r_i * d/dW log softmax(W x_i)[a_i]`, summed in
/// batch order. Pure function of its inputs.
pub fn compute_gradient(
    batch: &[GradSample],
    env: &BanditEnv,
    policy: &LinearPolicy,
) -> Result<Vec<f64>, ToyRlError> {
    if batch.is_empty() {
        return Err(ToyRlError::DimensionMismatch("empty batch".into()));
    }
    if policy.dim != env.context_dim || policy.n_arms != env.n_arms {
        return Err(ToyRlError::DimensionMismatch(format!(
            "policy {}x{} vs env {}x{}",
            policy.n_arms, policy.dim, env.n_arms, env.context_dim
        )));
    }
    let mut grad = vec![0.0; policy.n_arms * policy.dim];
    for sample in batch {
        if sample.context >= env.n_contexts() || sample.action >= env.n_arms {
            return Err(ToyRlError::DimensionMismatch(format!(
                "sample out of range: context {} action {}",
                sample.context, sample.action
            )));
        }
        if sample.reward == 0.0 {
            continue;
        }
        let x = &env.contexts[sample.context];
        let probs = policy.probabilities(x);
        for a in 0..policy.n_arms {
            let indicator = if a == sample.action { 1.0 } else { 0.0 };
            let coeff = sample.reward * (indicator - probs[a]);
            let row = &mut grad[a * policy.dim..(a + 1) * policy.dim];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += coeff * xi;
            }
        }
    }
    Ok(grad)
}

/// Adds gradients element-wise into an accumulator (fixed-order reduction).
pub fn accumulate_gradient(acc: &mut [f64], grad: &[f64]) {
    debug_assert_eq!(acc.len(), grad.len());
    for (a, g) in acc.iter_mut().zip(grad) {
        *a += g;
    }
}

/// Mean-normalized ascent step: `W + lr * G / batch_size`.
pub fn apply_update(policy: &LinearPolicy, grad: &[f64], lr: f64, batch_size: usize) -> LinearPolicy {
    debug_assert_eq!(grad.len(), policy.w.len());
    debug_assert!(batch_size >= 1);
    let scale = lr / batch_size as f64;
    let w = policy.w.iter().zip(grad).map(|(wi, gi)| wi + scale * gi).collect();
    LinearPolicy { n_arms: policy.n_arms, dim: policy.dim, w }
}

/// Exact expected reward: mean over contexts of the probability mass the
/// policy puts on the optimal arm.
pub fn success_rate(policy: &LinearPolicy, env: &BanditEnv) -> f64 {
    let mut total = 0.0;
    for (c, x) in env.contexts.iter().enumerate() {
        total += policy.probabilities(x)[env.optimal_arm[c]];
    }
    total / env.n_contexts() as f64
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
    fn zero_weights_give_uniform_distribution() {
        let env = BanditEnv::one_hot(4, 40);
        let policy = LinearPolicy::zeros(4, 4);
        for x in &env.contexts {
            let probs = policy.probabilities(x);
            for p in &probs {
                assert!((p - 0.25).abs() < 1e-12);
            }
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((success_rate(&policy, &env) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturation() {
        let mut policy = LinearPolicy::zeros(4, 4);
        policy.w[0] = 100.0; // logit 100 for arm 0 on context 0
        let probs = policy.probabilities(&[1.0, 0.0, 0.0, 0.0]);
        assert!(probs[0] >= 1.0 - 1e-40);
    }

    #[test]
    fn saturated_optimal_success_rate() {
        let env = BanditEnv::one_hot(4, 40);
        let mut policy = LinearPolicy::zeros(4, 4);
        for i in 0..4 {
            policy.w[i * 4 + i] = 100.0;
        }
        assert!(success_rate(&policy, &env) >= 0.999);
    }

    #[test]
    fn act_frequencies_match_softmax_within_3_sigma() {
        let mut policy = LinearPolicy::zeros(3, 2);
        policy.w = vec![0.3, -0.2, 1.1, 0.0, -0.7, 0.4];
        let x = [0.8, 0.6];
        let probs = policy.probabilities(&x);
        let n = 100_000usize;
        let mut counts = vec![0usize; 3];
        let mut r = rng(17);
        for _ in 0..n {
            let (a, logp) = policy_act(&policy, &x, &mut r);
            counts[a] += 1;
            assert!((logp - probs[a].ln()).abs() < 1e-12);
        }
        for a in 0..3 {
            let freq = counts[a] as f64 / n as f64;
            let sigma = (probs[a] * (1.0 - probs[a]) / n as f64).sqrt();
            assert!(
                (freq - probs[a]).abs() <= 3.0 * sigma,
                "arm {a}: freq {freq} vs p {} (3 sigma {})",
                probs[a],
                3.0 * sigma
            );
        }
    }

    #[test]
    fn act_consumes_one_draw() {
        let policy = LinearPolicy::zeros(4, 4);
        let mut r1 = rng(5);
        let mut r2 = rng(5);
        let _ = policy_act(&policy, &[1.0, 0.0, 0.0, 0.0], &mut r1);
        let _: f64 = r2.gen();
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn gradient_at_uniformity_closed_form() {
        // Uniform policy, one-hot context e0, action 0, reward 1:
        // row 0 gets (1 - 1/4) e0, the others -1/4 e0.
        let env = BanditEnv::one_hot(4, 40);
        let policy = LinearPolicy::zeros(4, 4);
        let batch = [GradSample { context: 0, action: 0, reward: 1.0, log_prob: 0.25f64.ln() }];
        let g = compute_gradient(&batch, &env, &policy).unwrap();
        assert!((g[0] - 0.75).abs() < 1e-12);
        for a in 1..4 {
            assert!((g[a * 4] + 0.25).abs() < 1e-12);
        }
        for a in 0..4 {
            for d in 1..4 {
                assert_eq!(g[a * 4 + d], 0.0);
            }
        }
    }

    #[test]
    fn zero_reward_zero_gradient() {
        let env = BanditEnv::one_hot(4, 40);
        let policy = LinearPolicy::zeros(4, 4);
        let batch: Vec<GradSample> = (0..8)
            .map(|i| GradSample { context: i % 4, action: (i + 1) % 4, reward: 0.0, log_prob: 0.0 })
            .collect();
        let g = compute_gradient(&batch, &env, &policy).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        // Directional derivative of sum r * log pi along 20 random
        // directions, h = 1e-5, relative tolerance 1e-6.
        let env = BanditEnv::one_hot(4, 40);
        let mut r = rng(23);
        let objective = |policy: &LinearPolicy, batch: &[GradSample]| -> f64 {
            batch
                .iter()
                .map(|s| {
                    if s.reward == 0.0 {
                        0.0
                    } else {
                        s.reward * policy.probabilities(&env.contexts[s.context])[s.action].ln()
                    }
                })
                .sum()
        };
        for _trial in 0..20 {
            let w: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
            let policy = LinearPolicy::from_weights(4, 4, w).unwrap();
            let batch: Vec<GradSample> = (0..12)
                .map(|_| GradSample {
                    context: r.gen_range(0..4),
                    action: r.gen_range(0..4),
                    reward: if r.gen_bool(0.6) { 1.0 } else { 0.0 },
                    log_prob: 0.0,
                })
                .collect();
            let g = compute_gradient(&batch, &env, &policy).unwrap();
            let dir: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let shift = |sign: f64| {
                let w: Vec<f64> =
                    policy.w.iter().zip(&dir).map(|(wi, di)| wi + sign * h * di).collect();
                LinearPolicy::from_weights(4, 4, w).unwrap()
            };
            let numeric = (objective(&shift(1.0), &batch) - objective(&shift(-1.0), &batch))
                / (2.0 * h);
            let analytic: f64 = g.iter().zip(&dir).map(|(gi, di)| gi * di).sum();
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                ((numeric - analytic) / denom).abs() < 1e-6,
                "numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn micro_batch_partition_reproduces_full_gradient() {
        let env = BanditEnv::one_hot(4, 40);
        let mut r = rng(31);
        let w: Vec<f64> = (0..16).map(|_| r.gen_range(-0.5..0.5)).collect();
        let policy = LinearPolicy::from_weights(4, 4, w).unwrap();
        let batch: Vec<GradSample> = (0..64)
            .map(|_| GradSample {
                context: r.gen_range(0..4),
                action: r.gen_range(0..4),
                reward: if r.gen_bool(0.5) { 1.0 } else { 0.0 },
                log_prob: 0.0,
            })
            .collect();
        let full = compute_gradient(&batch, &env, &policy).unwrap();
        for micro in [1usize, 3, 8, 16, 64] {
            let mut acc = vec![0.0; 16];
            for part in batch.chunks(micro) {
                let g = compute_gradient(part, &env, &policy).unwrap();
                accumulate_gradient(&mut acc, &g);
            }
            for (a, f) in acc.iter().zip(&full) {
                assert!((a - f).abs() <= 1e-12, "micro {micro}");
            }
        }
    }

    #[test]
    fn apply_update_arithmetic() {
        let policy = LinearPolicy::zeros(4, 4);
        let zero = vec![0.0; 16];
        assert_eq!(apply_update(&policy, &zero, 0.3, 4).w, policy.w);
        let mut g = vec![0.0; 16];
        g[0] = 0.75;
        let updated = apply_update(&policy, &g, 1.0, 1);
        assert!((updated.w[0] - 0.75).abs() < 1e-15);
    }

    /// Reference single-threaded training loop; the oracle for the one-hot
    /// preset's learning behavior and for live-run parity checks.
    pub(crate) fn reference_training_run(
        env: &BanditEnv,
        updates: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Vec<f64> {
        let mut policy = LinearPolicy::zeros(env.n_arms, env.context_dim);
        let mut r = rng(seed);
        let mut curve = Vec::with_capacity(updates);
        for _ in 0..updates {
            let mut batch = Vec::with_capacity(batch_size);
            for _ in 0..batch_size {
                let c = env.sample_context(&mut r);
                let (a, logp) = policy_act(&policy, &env.contexts[c], &mut r);
                batch.push(GradSample {
                    context: c,
                    action: a,
                    reward: env.reward(c, a),
                    log_prob: logp,
                });
            }
            let g = compute_gradient(&batch, &env, &policy).unwrap();
            policy = apply_update(&policy, &g, lr, batch.len());
            curve.push(success_rate(&policy, env));
        }
        curve
    }

    #[test]
    fn reference_loop_reaches_090_within_200_updates() {
        let env = BanditEnv::one_hot(4, 40);
        let curve = reference_training_run(&env, 200, 32, 0.5, 42);
        assert!(*curve.last().unwrap() >= 0.9, "final {}", curve.last().unwrap());
    }

    #[test]
    fn success_rate_non_decreasing_on_one_hot_preset() {
        let env = BanditEnv::one_hot(4, 40);
        for seed in [1u64, 2, 3] {
            let curve = reference_training_run(&env, 200, 32, 0.5, seed);
            for w in curve.windows(2) {
                assert!(w[1] >= w[0] - 1e-12, "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn success_rate_matches_monte_carlo_within_3_sigma() {
        let env = BanditEnv::one_hot(4, 40);
        let mut r = rng(77);
        let w: Vec<f64> = (0..16).map(|_| r.gen_range(-1.0..1.0)).collect();
        let policy = LinearPolicy::from_weights(4, 4, w).unwrap();
        let exact = success_rate(&policy, &env);
        let n = 100_000usize;
        let mut hits = 0usize;
        for _ in 0..n {
            let c = env.sample_context(&mut r);
            let (a, _) = policy_act(&policy, &env.contexts[c], &mut r);
            if env.reward(c, a) == 1.0 {
                hits += 1;
            }
        }
        let mc = hits as f64 / n as f64;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((mc - exact).abs() <= 3.0 * sigma, "mc {mc} exact {exact}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let env = BanditEnv::one_hot(4, 40);
        let policy = LinearPolicy::zeros(3, 3);
        let batch = [GradSample { context: 0, action: 0, reward: 1.0, log_prob: 0.0 }];
        assert!(compute_gradient(&batch, &env, &policy).is_err());
        assert!(compute_gradient(&[], &env, &policy).is_err());
    }
}
