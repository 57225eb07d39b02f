//! PPO with fully separate actor and critic networks.
//!
//! The actor emits categorical logits, the critic a scalar value. Each network
//! has its own Adam state; both use the same learning rate. Every update is
//! followed by the diagnostics the screening rules consume (approximate KL,
//! clip fraction) and, at each 1% of training, by structural measurements on
//! the probe batch.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{make_probe_batch, EnvId, ProbeBatch};
use crate::error::{contract, LabError, Result};
use crate::nn::{
    adam_step, backward, clip_global_norm, forward, init_network, AdamState, Gradients, HeadKind, Network,
};
use crate::oui::{compute_mask, flip_fraction, unit_flip_fraction, ActivationMask, OuiReport};
use crate::sweep::{CheckpointMetrics, RunRecord};
use crate::theory::drift_decomposition;

pub const CHECKPOINTS: usize = 100;
/// Checkpoint index (out of [`CHECKPOINTS`]) holding the early measurement.
pub const EARLY_CHECKPOINT: usize = 10;
pub const RETURN_WINDOW: usize = 50;
const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_len: usize,
    pub total_steps: usize,
    pub seed: u64,
}

impl PpoConfig {
    pub fn for_env(env: EnvId, lr: f64, seed: u64) -> Self {
        let (rollout_len, total_steps) = match env {
            EnvId::CartPole => (1024, 120_000),
            EnvId::GridRoom => (512, 20_000),
        };
        Self {
            lr,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.1,
            epochs: 4,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            rollout_len,
            total_steps,
            seed,
        }
    }

    pub fn num_updates(&self) -> usize {
        self.total_steps / self.rollout_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LabError::Config(format!("invalid PPO config: {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_range > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("clip_range and max_grad_norm must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 {
            return bad("epochs, minibatch and rollout_len must be positive");
        }
        if self.num_updates() == 0 {
            return bad("total_steps must cover at least one rollout");
        }
        Ok(())
    }
}

/// Collected rollout. `next_values[t]` is the critic value of the state reached by step `t`
/// (the pre-reset observation when an episode ended there).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub observations: Array2<f64>,
    pub actions: Vec<usize>,
    pub log_probs_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub value_estimates: Vec<f64>,
    pub next_values: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Backward GAE recursion.
///
/// `δ_t = r_t + γ·V(s_{t+1})·(1 − terminated_t) − V(s_t)` and
/// `A_t = δ_t + γλ·(1 − done_t)·A_{t+1}` where `done` is termination or truncation;
/// a truncated step keeps its bootstrap value but does not borrow advantage from the
/// next episode. Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    truncated: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    contract!(
        values.len() == n && next_values.len() == n && terminated.len() == n && truncated.len() == n,
        "GAE inputs must have equal length (rewards {n}, values {}, next_values {}, terminated {}, truncated {})",
        values.len(),
        next_values.len(),
        terminated.len(),
        truncated.len()
    );
    let mut advantages = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let alive = if terminated[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_values[t] * alive - values[t];
        let continues = if terminated[t] || truncated[t] { 0.0 } else { 1.0 };
        carry = delta + gamma * lambda * continues * carry;
        advantages[t] = carry;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Shifts and scales to zero mean and unit (population) standard deviation; the deviation
/// is floored at 1e-8.
pub fn normalize_advantages(advantages: &mut [f64]) {
    if advantages.is_empty() {
        return;
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ADVANTAGE_STD_FLOOR);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return a;
        }
    }
    log_probs.len() - 1
}

/// Rollout plus the advantage targets for one update.
#[derive(Debug, Clone)]
pub struct UpdateBatch {
    pub trajectory: Trajectory,
    /// Normalized over the whole rollout.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Per-minibatch losses, gradients and diagnostics.
#[derive(Debug, Clone)]
pub struct MinibatchGradients {
    pub actor: Gradients,
    pub critic: Gradients,
    pub diagnostics: UpdateDiagnostics,
}

/// Clipped-surrogate and value-regression gradients on the rows `indices` of `batch`.
pub fn minibatch_gradients(
    actor: &Network,
    critic: &Network,
    batch: &UpdateBatch,
    indices: &[usize],
    config: &PpoConfig,
) -> Result<MinibatchGradients> {
    let traj = &batch.trajectory;
    contract!(!indices.is_empty(), "empty minibatch");
    let n = indices.len() as f64;
    let obs = traj.observations.select(Axis(0), indices);

    let actor_trace = forward(actor, obs.view())?;
    let log_probs = log_softmax(&actor_trace.outputs);
    let n_actions = actor.output_dim();
    let eps = config.clip_range;
    let mut d_logits = Array2::zeros((indices.len(), n_actions));
    let mut diag = UpdateDiagnostics::default();
    for (row, &i) in indices.iter().enumerate() {
        let a = traj.actions[i];
        let adv = batch.advantages[i];
        let log_ratio = log_probs[[row, a]] - traj.log_probs_old[i];
        let ratio = log_ratio.exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
        diag.policy_loss -= unclipped.min(clipped) / n;
        diag.approx_kl += ((ratio - 1.0) - log_ratio) / n;
        if (ratio - 1.0).abs() > eps {
            diag.clip_fraction += 1.0 / n;
        }
        let probs: Vec<f64> = log_probs.row(row).iter().map(|lp| lp.exp()).collect();
        let entropy = -log_probs.row(row).iter().zip(&probs).map(|(lp, p)| p * lp).sum::<f64>();
        diag.entropy += entropy / n;
        // d(−min(...))/d log π(a) is −r·Â when the unclipped branch is the active minimum
        let d_log_prob = if unclipped <= clipped { -ratio * adv / n } else { 0.0 };
        for k in 0..n_actions {
            let onehot = if k == a { 1.0 } else { 0.0 };
            let mut g = d_log_prob * (onehot - probs[k]);
            if config.entropy_coef != 0.0 {
                g += config.entropy_coef * probs[k] * (log_probs[[row, k]] + entropy) / n;
            }
            d_logits[[row, k]] = g;
        }
    }
    let actor_grads = backward(actor, &actor_trace, d_logits.view())?;

    let critic_trace = forward(critic, obs.view())?;
    let mut d_values = Array2::zeros((indices.len(), 1));
    for (row, &i) in indices.iter().enumerate() {
        let err = critic_trace.outputs[[row, 0]] - batch.returns[i];
        diag.value_loss += config.value_coef * 0.5 * err * err / n;
        d_values[[row, 0]] = config.value_coef * err / n;
    }
    let critic_grads = backward(critic, &critic_trace, d_values.view())?;

    if !(diag.policy_loss.is_finite() && diag.value_loss.is_finite()) {
        return Err(LabError::NonFinite("PPO loss".into()));
    }
    Ok(MinibatchGradients {
        actor: actor_grads,
        critic: critic_grads,
        diagnostics: diag,
    })
}

/// The trainable state of one run.
#[derive(Debug, Clone)]
pub struct Learner {
    pub actor: Network,
    pub critic: Network,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl Learner {
    pub fn new(env: EnvId, seed: u64) -> Result<Self> {
        let [h1, h2] = env.hidden_sizes();
        let actor = init_network(
            &[env.obs_dim(), h1, h2, env.num_actions()],
            HeadKind::PolicyLogits,
            derive_seed(seed, 1),
        )?;
        let critic = init_network(&[env.obs_dim(), h1, h2, 1], HeadKind::ScalarValue, derive_seed(seed, 2))?;
        Ok(Self {
            actor_opt: AdamState::new(&actor),
            critic_opt: AdamState::new(&critic),
            actor,
            critic,
        })
    }
}

/// `epochs` passes of shuffled minibatches over the rollout, with separate clipped Adam
/// steps for actor and critic. Diagnostics are averaged over all minibatches.
pub fn ppo_update(
    learner: &mut Learner,
    batch: &UpdateBatch,
    config: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateDiagnostics> {
    let n = batch.trajectory.len();
    contract!(
        batch.advantages.len() == n && batch.returns.len() == n,
        "advantages/returns do not match the trajectory length"
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut total = UpdateDiagnostics::default();
    let mut count = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let mut g = minibatch_gradients(&learner.actor, &learner.critic, batch, chunk, config)?;
            clip_global_norm(&mut g.actor, config.max_grad_norm)?;
            clip_global_norm(&mut g.critic, config.max_grad_norm)?;
            adam_step(&mut learner.actor, &mut learner.actor_opt, &g.actor, config.lr)?;
            adam_step(&mut learner.critic, &mut learner.critic_opt, &g.critic, config.lr)?;
            let d = g.diagnostics;
            total.approx_kl += d.approx_kl;
            total.clip_fraction += d.clip_fraction;
            total.policy_loss += d.policy_loss;
            total.value_loss += d.value_loss;
            total.entropy += d.entropy;
            count += 1;
        }
    }
    let c = count as f64;
    Ok(UpdateDiagnostics {
        approx_kl: total.approx_kl / c,
        clip_fraction: total.clip_fraction / c,
        policy_loss: total.policy_loss / c,
        value_loss: total.value_loss / c,
        entropy: total.entropy / c,
    })
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Environment-side state carried across rollouts.
struct Collector {
    env: crate::envs::Env,
    obs: Vec<f64>,
    episode_return: f64,
    completed: Vec<f64>,
    policy_rng: ChaCha8Rng,
}

impl Collector {
    fn new(env_id: EnvId, seed: u64) -> Self {
        let mut env = env_id.make(derive_seed(seed, 3));
        let obs = env.reset();
        Self {
            env,
            obs,
            episode_return: 0.0,
            completed: Vec::new(),
            policy_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
        }
    }

    fn collect(&mut self, learner: &Learner, steps: usize, obs_dim: usize) -> Result<Trajectory> {
        let mut observations = Vec::with_capacity(steps * obs_dim);
        let mut successors = Vec::with_capacity(steps * obs_dim);
        let mut actions = Vec::with_capacity(steps);
        let mut log_probs_old = Vec::with_capacity(steps);
        let mut rewards = Vec::with_capacity(steps);
        let mut terminated = Vec::with_capacity(steps);
        let mut truncated = Vec::with_capacity(steps);
        for _ in 0..steps {
            let row = Array2::from_shape_vec((1, obs_dim), self.obs.clone())
                .map_err(|e| LabError::Contract(e.to_string()))?;
            let logits = forward(&learner.actor, row.view())?.outputs;
            let lp = log_softmax(&logits);
            let lp = lp.row(0);
            if lp.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite("policy logits".into()));
            }
            let action = sample_categorical(lp.as_slice().expect("contiguous"), &mut self.policy_rng);
            let step = self.env.step(action)?;
            observations.extend_from_slice(&self.obs);
            successors.extend_from_slice(&step.observation);
            actions.push(action);
            log_probs_old.push(lp[action]);
            rewards.push(step.reward);
            terminated.push(step.terminated);
            truncated.push(step.truncated);
            self.episode_return += step.reward;
            if step.done() {
                self.completed.push(self.episode_return);
                self.episode_return = 0.0;
                self.obs = self.env.reset();
            } else {
                self.obs = step.observation;
            }
        }
        let observations =
            Array2::from_shape_vec((steps, obs_dim), observations).map_err(|e| LabError::Contract(e.to_string()))?;
        let successors =
            Array2::from_shape_vec((steps, obs_dim), successors).map_err(|e| LabError::Contract(e.to_string()))?;
        let value_estimates = forward(&learner.critic, observations.view())?
            .outputs
            .column(0)
            .to_vec();
        let next_values = forward(&learner.critic, successors.view())?.outputs.column(0).to_vec();
        if value_estimates.iter().chain(&next_values).any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("critic values".into()));
        }
        Ok(Trajectory {
            observations,
            actions,
            log_probs_old,
            rewards,
            value_estimates,
            next_values,
            terminated,
            truncated,
        })
    }

    /// Mean of the last [`RETURN_WINDOW`] completed episodes, or `None` before the first one ends.
    fn return_ma(&self) -> Option<f64> {
        let tail = &self.completed[self.completed.len().saturating_sub(RETURN_WINDOW)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Update index (1-based) after which checkpoint `k ∈ 1..=100` is taken.
pub fn checkpoint_update(k: usize, num_updates: usize) -> usize {
    (k * num_updates).div_ceil(CHECKPOINTS)
}

/// State handed to a [`TrainingObserver`] right before each PPO update.
pub struct TrainingSnapshot<'a> {
    /// 1-based index of the update about to run.
    pub update: usize,
    pub num_updates: usize,
    pub learner: &'a Learner,
    pub batch: &'a UpdateBatch,
    pub probe: &'a ProbeBatch,
}

pub trait TrainingObserver {
    fn before_update(&mut self, snapshot: &TrainingSnapshot<'_>);
}

impl<F: FnMut(&TrainingSnapshot<'_>)> TrainingObserver for F {
    fn before_update(&mut self, snapshot: &TrainingSnapshot<'_>) {
        self(snapshot)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Positivity-count identity checks performed between consecutive checkpoints.
    pub accounting_checks: u64,
    pub final_learner: Learner,
}

/// Trains one run on the environment's default probe batch.
pub fn train_run(env_id: EnvId, config: &PpoConfig) -> Result<RunRecord> {
    let probe = make_probe_batch(env_id, env_id.probe_size(), 0)?;
    Ok(train_run_with(env_id, config, &probe, &mut |_: &TrainingSnapshot<'_>| {})?.record)
}

fn mask_entries(mask: &ActivationMask) -> f64 {
    mask.layers().iter().map(|l| l.len()).sum::<usize>() as f64
}

fn unit_count(mask: &ActivationMask) -> f64 {
    mask.layer_sizes().iter().sum::<usize>() as f64
}

struct BranchMasks {
    actor: ActivationMask,
    critic: ActivationMask,
}

fn branch_masks(learner: &Learner, probe: &ProbeBatch) -> Result<BranchMasks> {
    Ok(BranchMasks {
        actor: compute_mask(&learner.actor, probe)?,
        critic: compute_mask(&learner.critic, probe)?,
    })
}

/// Full training loop with checkpoints every 1% of updates. A non-finite loss, gradient or
/// parameter stops the run and returns the checkpoints logged so far with `diverged = true`.
pub fn train_run_with(
    env_id: EnvId,
    config: &PpoConfig,
    probe: &ProbeBatch,
    observer: &mut dyn TrainingObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    contract!(
        probe.obs_dim() == env_id.obs_dim(),
        "probe batch width {} does not match {env_id}",
        probe.obs_dim()
    );
    let num_updates = config.num_updates();
    let mut learner = Learner::new(env_id, config.seed)?;
    let mut collector = Collector::new(env_id, config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5));

    let mut record = RunRecord::new(env_id, config.clone());
    let mut prev = branch_masks(&learner, probe)?;
    let mut accounting_checks = 0u64;
    let mut next_k = 1usize;
    let mut last_checkpointed = 0usize;

    for update in 1..=num_updates {
        let step = (|| -> Result<UpdateDiagnostics> {
            let trajectory = collector.collect(&learner, config.rollout_len, env_id.obs_dim())?;
            let (mut advantages, returns) = compute_gae(
                &trajectory.rewards,
                &trajectory.value_estimates,
                &trajectory.next_values,
                &trajectory.terminated,
                &trajectory.truncated,
                config.gamma,
                config.gae_lambda,
            )?;
            normalize_advantages(&mut advantages);
            let batch = UpdateBatch {
                trajectory,
                advantages,
                returns,
            };
            observer.before_update(&TrainingSnapshot {
                update,
                num_updates,
                learner: &learner,
                batch: &batch,
                probe,
            });
            ppo_update(&mut learner, &batch, config, &mut shuffle_rng)
        })();
        let diagnostics = match step {
            Ok(d) => d,
            Err(LabError::NonFinite(_)) => {
                record.mark_diverged();
                break;
            }
            Err(e) => return Err(e),
        };

        if next_k <= CHECKPOINTS && checkpoint_update(next_k, num_updates) == update {
            let curr = branch_masks(&learner, probe)?;
            for (p, c) in [(&prev.actor, &curr.actor), (&prev.critic, &curr.critic)] {
                accounting_checks += drift_decomposition(p, c)?.checks;
            }
            // both branches pooled, weighted by their mask sizes
            let (wa, wc) = (mask_entries(&curr.actor), mask_entries(&curr.critic));
            let pool = |a: f64, c: f64| (a * wa + c * wc) / (wa + wc);
            let flip = pool(
                flip_fraction(&prev.actor, &curr.actor)?,
                flip_fraction(&prev.critic, &curr.critic)?,
            );
            let (ua, uc) = (unit_count(&curr.actor), unit_count(&curr.critic));
            let flip_u = (unit_flip_fraction(&prev.actor, &curr.actor)? * ua
                + unit_flip_fraction(&prev.critic, &curr.critic)? * uc)
                / (ua + uc);
            let oui_a = OuiReport::from_mask(&curr.actor)?.branch_mean;
            let oui_c = OuiReport::from_mask(&curr.critic)?.branch_mean;
            let ret = collector.return_ma();
            // several checkpoints share an update when there are fewer than 100 updates
            while next_k <= CHECKPOINTS && checkpoint_update(next_k, num_updates) == update {
                let first = last_checkpointed != update;
                last_checkpointed = update;
                record.checkpoints.push(CheckpointMetrics {
                    f: next_k as f64 / CHECKPOINTS as f64,
                    ret,
                    oui_a,
                    oui_c,
                    kl: diagnostics.approx_kl,
                    clip: diagnostics.clip_fraction,
                    flip: if first { flip } else { 0.0 },
                    flip_u: if first { flip_u } else { 0.0 },
                });
                next_k += 1;
            }
            prev = curr;
        }
    }
    record.finish();
    Ok(TrainOutcome {
        record,
        accounting_checks,
        final_learner: learner,
    })
}

/// Stable identifier of a run: hash of the environment and the full effective config.
pub fn run_id(env_id: EnvId, config: &PpoConfig) -> String {
    let canonical = serde_json::json!({ "env_id": env_id, "config": config });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Direct discounted sum of TD errors, no recursion.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        next_values: &[f64],
        terminated: &[bool],
        truncated: &[bool],
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| {
                let alive = if terminated[t] { 0.0 } else { 1.0 };
                rewards[t] + gamma * next_values[t] * alive - values[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut weight = 1.0;
                for k in t..n {
                    sum += weight * delta[k];
                    if terminated[k] || truncated[k] {
                        break;
                    }
                    weight *= gamma * lambda;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_two_step_episode() {
        let (adv, ret) = compute_gae(
            &[1.0, 1.0],
            &[0.5, 0.5],
            &[0.5, 123.0],
            &[false, true],
            &[false, false],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(adv, vec![1.5, 0.5]);
        assert_eq!(ret, vec![2.0, 1.0]);
    }

    #[test]
    fn gae_degenerate_cases() {
        let (adv, _) = compute_gae(&[0.0; 4], &[0.0; 4], &[0.0; 4], &[false; 4], &[false; 4], 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));

        let rewards = [0.3, -1.0, 2.0];
        let values = [0.1, 0.2, 0.3];
        let next = [0.2, 0.3, 0.7];
        let term = [false, false, false];
        let (adv, _) = compute_gae(&rewards, &values, &next, &term, &[false; 3], 0.9, 0.0).unwrap();
        for t in 0..3 {
            let delta = rewards[t] + 0.9 * next[t] - values[t];
            assert_eq!(adv[t], delta);
        }
        assert!(compute_gae(&rewards, &values[..2], &next, &term, &[false; 3], 0.9, 0.0).is_err());
    }

    #[test]
    fn gae_truncation_bootstraps_without_borrowing() {
        let rewards = [1.0, 1.0, 1.0];
        let values = [0.0, 0.0, 0.0];
        let next = [0.0, 10.0, 0.0];
        let (adv, _) = compute_gae(&rewards, &values, &next, &[false; 3], &[false, true, false], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![12.0, 11.0, 1.0]);
        let (adv, _) = compute_gae(&rewards, &values, &next, &[false, true, false], &[false; 3], 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn gae_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..=32);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let next: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let term: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
            let trunc: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.1)).collect();
            for &(g, l) in &[(0.99, 0.95), (1.0, 0.5), (0.5, 1.0)] {
                let (adv, _) = compute_gae(&rewards, &values, &next, &term, &trunc, g, l).unwrap();
                let oracle = gae_oracle(&rewards, &values, &next, &term, &trunc, g, l);
                for (a, b) in adv.iter().zip(&oracle) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn normalization_moments() {
        let mut adv: Vec<f64> = (0..1024).map(|i| ((i * 37) % 101) as f64 * 0.3 - 7.0).collect();
        normalize_advantages(&mut adv);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-6);

        let mut flat = vec![3.0; 8];
        normalize_advantages(&mut flat);
        assert!(flat.iter().all(|&a| a == 0.0));
    }

    fn tiny_batch(log_probs_old: Vec<f64>, advantages: Vec<f64>, actions: Vec<usize>) -> UpdateBatch {
        let n = actions.len();
        UpdateBatch {
            trajectory: Trajectory {
                observations: Array2::zeros((n, 4)),
                actions,
                log_probs_old,
                rewards: vec![0.0; n],
                value_estimates: vec![0.0; n],
                next_values: vec![0.0; n],
                terminated: vec![false; n],
                truncated: vec![false; n],
            },
            returns: vec![0.0; n],
            advantages,
        }
    }

    fn zero_input_actor(logits: [f64; 2]) -> Network {
        // zero observations make the logits equal the head bias
        let mut net = init_network(&[4, 3, 2], HeadKind::PolicyLogits, 0).unwrap();
        net.layers_mut()[1].bias = array![logits[0], logits[1]];
        net
    }

    #[test]
    fn identical_policy_has_zero_kl_and_clip() {
        let actor = zero_input_actor([0.0, 0.0]);
        let critic = init_network(&[4, 3, 1], HeadKind::ScalarValue, 0).unwrap();
        let lp = (0.5f64).ln();
        let batch = tiny_batch(vec![lp; 3], vec![1.0, -1.0, 0.5], vec![0, 1, 0]);
        let g = minibatch_gradients(
            &actor,
            &critic,
            &batch,
            &[0, 1, 2],
            &PpoConfig::for_env(EnvId::CartPole, 1e-3, 0),
        )
        .unwrap();
        assert_eq!(g.diagnostics.approx_kl, 0.0);
        assert_eq!(g.diagnostics.clip_fraction, 0.0);
        assert!((g.diagnostics.entropy - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clip_fraction_counts_ratios_outside_band() {
        let actor = zero_input_actor([0.0, 0.0]);
        let critic = init_network(&[4, 3, 1], HeadKind::ScalarValue, 0).unwrap();
        let lp_new = (0.5f64).ln();
        let old: Vec<f64> = [1.05f64, 1.2, 0.85].iter().map(|r| lp_new - r.ln()).collect();
        let batch = tiny_batch(old, vec![1.0; 3], vec![0, 0, 0]);
        let cfg = PpoConfig::for_env(EnvId::CartPole, 1e-3, 0);
        let g = minibatch_gradients(&actor, &critic, &batch, &[0, 1, 2], &cfg).unwrap();
        assert!((g.diagnostics.clip_fraction - 2.0 / 3.0).abs() < 1e-15);
        assert!(g.diagnostics.approx_kl > 0.0);
    }

    #[test]
    fn clipped_branch_is_used_for_large_ratio() {
        let actor = zero_input_actor([0.0, 0.0]);
        let critic = init_network(&[4, 3, 1], HeadKind::ScalarValue, 0).unwrap();
        let lp_new = (0.5f64).ln();
        let batch = tiny_batch(vec![lp_new - 1.5f64.ln()], vec![2.0], vec![1]);
        let cfg = PpoConfig::for_env(EnvId::CartPole, 1e-3, 0);
        let g = minibatch_gradients(&actor, &critic, &batch, &[0], &cfg).unwrap();
        assert!((g.diagnostics.policy_loss + 1.1 * 2.0).abs() < 1e-12);
        // clipped branch carries no policy gradient
        assert!(g.actor.values().all(|&v| v == 0.0));

        // ratio below the band with positive advantage keeps the unclipped gradient
        let batch = tiny_batch(vec![lp_new - 0.5f64.ln()], vec![2.0], vec![1]);
        let g = minibatch_gradients(&actor, &critic, &batch, &[0], &cfg).unwrap();
        assert!((g.diagnostics.policy_loss + 0.5 * 2.0).abs() < 1e-12);
        assert!(g.actor.values().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(checkpoint_update(1, 117), 2);
        assert_eq!(checkpoint_update(10, 117), 12);
        assert_eq!(checkpoint_update(100, 117), 117);
        assert_eq!(checkpoint_update(1, 39), 1);
        assert_eq!(checkpoint_update(100, 39), 39);
        assert_eq!(PpoConfig::for_env(EnvId::CartPole, 1e-3, 0).num_updates(), 117);
        assert_eq!(PpoConfig::for_env(EnvId::GridRoom, 1e-3, 0).num_updates(), 39);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PpoConfig::for_env(EnvId::CartPole, 1e-3, 0);
        assert!(cfg.validate().is_ok());
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        cfg.lr = 1e-3;
        cfg.total_steps = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_id_is_stable_and_sensitive() {
        let a = PpoConfig::for_env(EnvId::CartPole, 1e-3, 0);
        let mut b = a.clone();
        assert_eq!(run_id(EnvId::CartPole, &a), run_id(EnvId::CartPole, &b));
        b.seed = 1;
        assert_ne!(run_id(EnvId::CartPole, &a), run_id(EnvId::CartPole, &b));
        assert_ne!(run_id(EnvId::CartPole, &a), run_id(EnvId::GridRoom, &a));
        assert_eq!(run_id(EnvId::CartPole, &a).len(), 16);
    }

    #[test]
    fn sampling_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = [0.25f64.ln(), 0.75f64.ln()];
        let ones = (0..20_000).filter(|_| sample_categorical(&lp, &mut rng) == 1).count();
        assert!((ones as f64 / 20_000.0 - 0.75).abs() < 0.02);
    }
}
