//! Proximal policy optimization with a clipped surrogate objective:
//! rollout collection, generalized advantage estimation, and actor/critic
//! updates on the dense NN stack.
//!
//! The actor conditions on a prefix of the observation (the load block for
//! the grid environment) and emits absolute normalized setpoint targets;
//! the critic sees the full observation. Policies are diagonal Gaussians
//! with a state-independent learnable log standard deviation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Scenario;
use crate::env::{decode_action, EnvError, GridEnv};
use crate::nn::{
    adam_step, adam_step_vec, gaussian_dlogp_dlogstd, gaussian_dlogp_dmean, gaussian_entropy,
    gaussian_log_prob, sample_action, AdamState, AdamVecState, CriticParams, PolicyParams,
};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("empty transition batch")]
    EmptyBatch,
    #[error("non-finite loss at update {update}; last good parameters retained")]
    NonFinite { update: usize },
}

/// One step of collected experience under the collection-time policy.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_est: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lam: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self { gamma: 0.99, lam: 0.95 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub rollout_steps: usize,
    pub total_updates: usize,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            epochs: 10,
            minibatch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            rollout_steps: 2048,
            total_updates: 200,
            entropy_coef: 0.0,
            normalize_advantages: true,
        }
    }
}

/// Accumulated reward of one episode.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for &r in rewards.iter().rev() {
        acc = r + gamma * acc;
    }
    acc
}

/// Backward-recursion GAE over a transition stream with episode
/// boundaries. `bootstrap_value` is the critic value of the state after
/// the final transition (zero when that transition ended its episode).
/// Returns (advantages, returns) with returns = advantages + values.
pub fn compute_gae(
    transitions: &[Transition],
    cfg: &GaeConfig,
    bootstrap_value: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = transitions.len();
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let tr = &transitions[t];
        let next_value = if tr.done {
            0.0
        } else if t + 1 == n {
            bootstrap_value
        } else {
            transitions[t + 1].value_est
        };
        let delta = tr.reward + cfg.gamma * next_value - tr.value_est;
        let carry = if tr.done { 0.0 } else { gae };
        gae = delta + cfg.gamma * cfg.lam * carry;
        advantages[t] = gae;
    }
    let returns = advantages
        .iter()
        .zip(transitions)
        .map(|(a, tr)| a + tr.value_est)
        .collect();
    (advantages, returns)
}

/// Per-sample clipped surrogate contribution:
/// min(r A, clip(r, 1-eps, 1+eps) A).
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Default)]
pub struct UpdateDiagnostics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
}

/// Actor/critic optimizer bundle; one instance drives a whole training
/// run so Adam moments persist across updates.
pub struct PpoUpdater {
    pub cfg: PpoConfig,
    actor_opt: AdamState,
    logstd_opt: AdamVecState,
    critic_opt: AdamState,
    rng: ChaCha8Rng,
    /// The actor reads this many leading observation entries.
    actor_obs_dim: usize,
}

impl PpoUpdater {
    pub fn new(cfg: PpoConfig, policy: &PolicyParams, critic: &CriticParams, seed: u64) -> Self {
        Self {
            actor_obs_dim: policy.actor.input_dim(),
            actor_opt: AdamState::new(&policy.actor),
            logstd_opt: AdamVecState::default(),
            critic_opt: AdamState::new(&critic.value),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
        }
    }

    /// Export Adam moments for checkpointing.
    pub fn optimizer_data(&self) -> crate::ckpt::OptimizerData {
        crate::ckpt::OptimizerData {
            actor: self.actor_opt.to_data(),
            log_std: self.logstd_opt.clone(),
            critic: Some(self.critic_opt.to_data()),
        }
    }

    /// Restore Adam moments from a checkpoint; shapes must match the
    /// parameters this updater was built for. Mismatches leave the fresh
    /// state in place.
    pub fn restore_optimizer(
        &mut self,
        data: &crate::ckpt::OptimizerData,
        policy: &PolicyParams,
        critic: &CriticParams,
    ) {
        if let Some(s) = AdamState::from_data(&data.actor, &policy.actor) {
            self.actor_opt = s;
        }
        self.logstd_opt = data.log_std.clone();
        if let Some(c) = data.critic.as_ref().and_then(|d| AdamState::from_data(d, &critic.value)) {
            self.critic_opt = c;
        }
    }

    /// One PPO update: several epochs of shuffled minibatches ascending the
    /// clipped surrogate and descending the critic squared error.
    pub fn update(
        &mut self,
        policy: &mut PolicyParams,
        critic: &mut CriticParams,
        batch: &[Transition],
        advantages: &[f64],
        returns: &[f64],
    ) -> Result<UpdateDiagnostics, PpoError> {
        let n = batch.len();
        if n == 0 {
            return Err(PpoError::EmptyBatch);
        }
        let adv = if self.cfg.normalize_advantages {
            normalize(advantages)
        } else {
            advantages.to_vec()
        };

        let act_dim = policy.actor.output_dim();
        let mut diag = UpdateDiagnostics::default();
        let mut minibatches = 0usize;
        let mut indices: Vec<usize> = (0..n).collect();

        for _epoch in 0..self.cfg.epochs {
            shuffle(&mut indices, &mut self.rng);
            for chunk in indices.chunks(self.cfg.minibatch_size) {
                let b = chunk.len();
                let obs_a = DMatrix::from_fn(b, self.actor_obs_dim, |r, c| {
                    batch[chunk[r]].state[c]
                });
                let obs_c = DMatrix::from_fn(b, batch[0].state.len(), |r, c| {
                    batch[chunk[r]].state[c]
                });

                // actor pass
                let cache = policy.actor.forward_cached(&obs_a)?;
                let means = cache.output();
                let log_std: Vec<f64> = policy.log_std.iter().copied().collect();
                let mut upstream_mean = DMatrix::zeros(b, act_dim);
                let mut grad_logstd = DVector::zeros(act_dim);
                let mut surrogate = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    let tr = &batch[i];
                    let mean_row: Vec<f64> = means.row(r).iter().copied().collect();
                    let logp_new = gaussian_log_prob(&mean_row, &log_std, &tr.action);
                    let ratio = (logp_new - tr.log_prob_old).clamp(-20.0, 20.0).exp();
                    let a = adv[i];
                    let surr_unclipped = ratio * a;
                    let surr_clipped = ratio.clamp(1.0 - self.cfg.clip_eps, 1.0 + self.cfg.clip_eps) * a;
                    surrogate += surr_unclipped.min(surr_clipped);
                    diag.mean_ratio += ratio;
                    if (ratio - 1.0).abs() > self.cfg.clip_eps {
                        diag.clip_fraction += 1.0;
                    }
                    // gradient flows only when the unclipped term is active
                    if surr_unclipped <= surr_clipped {
                        // d(-surr/b)/d logp = -(ratio * a)/b
                        let dl_dlogp = -(ratio * a) / b as f64;
                        let dmean = gaussian_dlogp_dmean(&mean_row, &log_std, &tr.action);
                        for d in 0..act_dim {
                            upstream_mean[(r, d)] = dl_dlogp * dmean[d];
                        }
                        let dls = gaussian_dlogp_dlogstd(&mean_row, &log_std, &tr.action);
                        for d in 0..act_dim {
                            grad_logstd[d] += dl_dlogp * dls[d];
                        }
                    }
                }
                let entropy = gaussian_entropy(&log_std);
                let actor_loss = -surrogate / b as f64 - self.cfg.entropy_coef * entropy;
                for d in 0..act_dim {
                    grad_logstd[d] -= self.cfg.entropy_coef; // d entropy / d log_std = 1
                }
                if !actor_loss.is_finite() {
                    return Err(PpoError::NonFinite { update: 0 });
                }
                let actor_grads = policy.actor.backward_cached(&cache, &upstream_mean);
                adam_step(&mut policy.actor, &actor_grads, &mut self.actor_opt, self.cfg.actor_lr);
                adam_step_vec(&mut policy.log_std, &grad_logstd, &mut self.logstd_opt, self.cfg.actor_lr);

                // critic pass
                let ccache = critic.value.forward_cached(&obs_c)?;
                let preds = ccache.output();
                let mut upstream_v = DMatrix::zeros(b, 1);
                let mut critic_loss = 0.0;
                for (r, &i) in chunk.iter().enumerate() {
                    let err = preds[(r, 0)] - returns[i];
                    critic_loss += err * err;
                    upstream_v[(r, 0)] = 2.0 * err / b as f64;
                }
                critic_loss /= b as f64;
                if !critic_loss.is_finite() {
                    return Err(PpoError::NonFinite { update: 0 });
                }
                let critic_grads = critic.value.backward_cached(&ccache, &upstream_v);
                adam_step(&mut critic.value, &critic_grads, &mut self.critic_opt, self.cfg.critic_lr);

                diag.actor_loss += actor_loss;
                diag.critic_loss += critic_loss;
                diag.entropy += entropy;
                minibatches += 1;
            }
        }
        let mb = minibatches.max(1) as f64;
        diag.actor_loss /= mb;
        diag.critic_loss /= mb;
        diag.entropy /= mb;
        diag.mean_ratio /= (n * self.cfg.epochs) as f64;
        diag.clip_fraction /= (n * self.cfg.epochs) as f64;
        Ok(diag)
    }
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    values.iter().map(|v| (v - mean) / std).collect()
}

fn shuffle<R: Rng>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Episodic environment the rollout collector can drive. Actions are the
/// policy's raw outputs (absolute normalized targets for the grid).
pub trait RolloutEnv {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool), EnvError>;
}

/// Grid environment bound to a pool of scenarios; `reset` draws one
/// uniformly and `step` converts the actor's absolute targets to deltas.
pub struct GridRolloutEnv {
    pub env: GridEnv,
    pub scenarios: Vec<Scenario>,
}

impl RolloutEnv for GridRolloutEnv {
    fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EnvError> {
        let idx = rng.gen_range(0..self.scenarios.len());
        self.env.reset(&self.scenarios[idx])
    }

    fn step(&mut self, target: &[f64]) -> Result<(Vec<f64>, f64, bool), EnvError> {
        let delta = decode_action(target, &self.env.normalized_setpoints());
        let result = self.env.step(&delta)?;
        Ok((result.next_state, result.reward, result.done))
    }
}

/// Synthetic one-dimensional bandit: a single-step episode whose reward is
/// `-(a - optimum)^2`. Exercises the full trainer without the grid.
pub struct BanditEnv {
    pub optimum: f64,
}

impl RolloutEnv for BanditEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EnvError> {
        Ok(vec![0.0])
    }

    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool), EnvError> {
        let d = action[0] - self.optimum;
        Ok((vec![0.0], -d * d, true))
    }
}

pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub bootstrap_value: f64,
    /// Mean undiscounted episodic return over completed episodes.
    pub mean_return: f64,
    pub episodes: usize,
}

/// Gather `n_steps` transitions by sampling the stochastic policy, starting
/// new episodes as previous ones end. The critic value of the state after
/// the last transition bootstraps a truncated final episode.
pub fn collect_rollouts<E: RolloutEnv>(
    env: &mut E,
    policy: &PolicyParams,
    critic: &CriticParams,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, PpoError> {
    let obs_dim = policy.actor.input_dim();
    let log_std: Vec<f64> = policy.log_std.iter().copied().collect();
    let mut transitions = Vec::with_capacity(n_steps);
    let mut state = env.reset(rng)?;
    let mut episode_return = 0.0;
    let mut finished_returns = Vec::new();
    let mut bootstrap_value = 0.0;

    for step in 0..n_steps {
        let mean = policy.actor.forward_one(&state[..obs_dim])?;
        let action = sample_action(&mean, &log_std, rng);
        let log_prob = gaussian_log_prob(&mean, &log_std, &action);
        let value = critic.value.forward_one(&state)?[0];
        let (next_state, reward, done) = env.step(&action)?;
        episode_return += reward;
        transitions.push(Transition {
            state: state.clone(),
            action,
            log_prob_old: log_prob,
            reward,
            value_est: value,
            done,
        });
        if done {
            finished_returns.push(episode_return);
            episode_return = 0.0;
            if step + 1 < n_steps {
                state = env.reset(rng)?;
            }
        } else {
            state = next_state;
        }
        if step + 1 == n_steps && !done {
            bootstrap_value = critic.value.forward_one(&state)?[0];
        }
    }
    let episodes = finished_returns.len();
    let mean_return = if episodes > 0 {
        finished_returns.iter().sum::<f64>() / episodes as f64
    } else {
        episode_return
    };
    Ok(RolloutBatch { transitions, bootstrap_value, mean_return, episodes })
}

/// Network shapes; input/output widths come from the case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub log_std_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { actor_hidden: vec![64, 64], critic_hidden: vec![64, 64], log_std_init: -1.0 }
    }
}

impl ArchConfig {
    /// Fresh actor (load features -> Sigmoid targets) and critic
    /// (full state -> scalar value) for a case.
    pub fn build(&self, case: &crate::case::Case, seed: u64) -> (PolicyParams, CriticParams) {
        use crate::nn::{Activation, MlpParams};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = case.bus_count();
        let s = case.gen_count();
        let mut actor_dims = vec![2 * m];
        actor_dims.extend(&self.actor_hidden);
        actor_dims.push(2 * s);
        let actor = MlpParams::new(&actor_dims, Activation::Relu, Activation::Sigmoid, &mut rng);
        let mut critic_dims = vec![2 * (m + s)];
        critic_dims.extend(&self.critic_hidden);
        critic_dims.push(1);
        let critic = MlpParams::new(&critic_dims, Activation::Relu, Activation::Linear, &mut rng);
        (
            PolicyParams {
                actor,
                log_std: nalgebra::DVector::from_element(2 * s, self.log_std_init),
            },
            CriticParams { value: critic },
        )
    }
}

/// Assemble the grid rollout environment from a labeled dataset (reward
/// calibration comes from the dataset) and run the training loop.
#[allow(clippy::too_many_arguments)]
pub fn train_on_dataset(
    case: &crate::case::Case,
    dataset: &crate::dataset::Dataset,
    policy: &mut PolicyParams,
    critic: &mut CriticParams,
    ppo_cfg: &PpoConfig,
    gae_cfg: &GaeConfig,
    mut env_cfg: crate::env::EnvConfig,
    seed: u64,
    eval_every: usize,
    eval_fn: Option<&mut dyn FnMut(&PolicyParams) -> f64>,
    resume: Option<&crate::ckpt::OptimizerData>,
) -> Result<TrainReport, PpoError> {
    if let Some(cal) = dataset.calibration {
        env_cfg.reward.k = cal.k;
        env_cfg.reward.b = cal.b;
    }
    let env = crate::env::GridEnv::new(case.clone(), env_cfg)?;
    let mut rollout_env = GridRolloutEnv { env, scenarios: dataset.scenarios.clone() };
    train(&mut rollout_env, policy, critic, ppo_cfg, gae_cfg, seed, eval_every, eval_fn, resume)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub update: usize,
    pub mean_return: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub eval_success_rate: Option<f64>,
}

pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Set when training stopped early on non-finite parameters; the
    /// returned parameters are the last finite ones.
    pub aborted: bool,
    /// Final Adam moments, for checkpointing and resumption.
    pub optimizer: crate::ckpt::OptimizerData,
}

/// Full training loop: collect, estimate advantages, update, periodically
/// evaluate through the provided hook. On numerical failure the last good
/// parameters are restored. `resume` restores optimizer moments from a
/// previous run's checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train<E: RolloutEnv>(
    env: &mut E,
    policy: &mut PolicyParams,
    critic: &mut CriticParams,
    ppo_cfg: &PpoConfig,
    gae_cfg: &GaeConfig,
    seed: u64,
    eval_every: usize,
    mut eval_fn: Option<&mut dyn FnMut(&PolicyParams) -> f64>,
    resume: Option<&crate::ckpt::OptimizerData>,
) -> Result<TrainReport, PpoError> {
    let mut updater = PpoUpdater::new(ppo_cfg.clone(), policy, critic, seed ^ 0x9e3779b97f4a7c15);
    if let Some(data) = resume {
        updater.restore_optimizer(data, policy, critic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ppo_cfg.total_updates);
    let mut last_good = (policy.clone(), critic.clone());

    for update in 0..ppo_cfg.total_updates {
        let batch = collect_rollouts(env, policy, critic, ppo_cfg.rollout_steps, &mut rng)?;
        let (advantages, returns) =
            compute_gae(&batch.transitions, gae_cfg, batch.bootstrap_value);
        let diag = match updater.update(policy, critic, &batch.transitions, &advantages, &returns)
        {
            Ok(d) => d,
            Err(PpoError::NonFinite { .. }) => {
                *policy = last_good.0;
                *critic = last_good.1;
                rows.push(LogRow {
                    update,
                    mean_return: batch.mean_return,
                    actor_loss: f64::NAN,
                    critic_loss: f64::NAN,
                    clip_fraction: 0.0,
                    eval_success_rate: None,
                });
                return Ok(TrainReport { rows, aborted: true, optimizer: updater.optimizer_data() });
            }
            Err(e) => return Err(e),
        };
        let finite = policy.actor.validate().is_ok()
            && critic.value.validate().is_ok()
            && policy.log_std.iter().all(|v| v.is_finite());
        if !finite {
            *policy = last_good.0;
            *critic = last_good.1;
            return Ok(TrainReport { rows, aborted: true, optimizer: updater.optimizer_data() });
        }
        last_good = (policy.clone(), critic.clone());

        let eval_success_rate = match (&mut eval_fn, eval_every > 0) {
            (Some(f), true)
                if (update + 1) % eval_every == 0 || update + 1 == ppo_cfg.total_updates =>
            {
                Some(f(policy))
            }
            _ => None,
        };
        rows.push(LogRow {
            update,
            mean_return: batch.mean_return,
            actor_loss: diag.actor_loss,
            critic_loss: diag.critic_loss,
            clip_fraction: diag.clip_fraction,
            eval_success_rate,
        });
    }
    Ok(TrainReport { rows, aborted: false, optimizer: updater.optimizer_data() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpParams};
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn discounted_return_fixtures() {
        assert_relative_eq!(discounted_return(&[1.0, 1.0, 1.0], 1.0), 3.0);
        assert_relative_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_relative_eq!(discounted_return(&[3.0, 7.0, -2.0], 0.0), 3.0);
    }

    fn toy_transitions(rewards: &[f64], values: &[f64], dones: &[bool]) -> Vec<Transition> {
        rewards
            .iter()
            .zip(values)
            .zip(dones)
            .map(|((&r, &v), &d)| Transition {
                state: vec![0.0],
                action: vec![0.0],
                log_prob_old: 0.0,
                reward: r,
                value_est: v,
                done: d,
            })
            .collect()
    }

    #[test]
    fn gae_hand_example() {
        // gamma 0.9, lambda 0.95, values (1,2,3), rewards (1,1,1), done at
        // the end: deltas (1.8, 1.7, -2); A2 = -2, A1 = -0.01, A0 = 1.79145
        let tr = toy_transitions(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &[false, false, true]);
        let (adv, ret) = compute_gae(&tr, &GaeConfig { gamma: 0.9, lam: 0.95 }, 0.0);
        assert_relative_eq!(adv[2], -2.0, epsilon = 1e-12);
        assert_relative_eq!(adv[1], -0.01, epsilon = 1e-12);
        assert_relative_eq!(adv[0], 1.79145, epsilon = 1e-12);
        assert_relative_eq!(ret[0], adv[0] + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let tr = toy_transitions(
            &[1.0, -0.5, 2.0, 0.3],
            &[0.2, 0.8, -0.1, 0.5],
            &[false, false, false, true],
        );
        let cfg = GaeConfig { gamma: 0.9, lam: 0.0 };
        let (adv, _) = compute_gae(&tr, &cfg, 0.0);
        for t in 0..4 {
            let next_v = if tr[t].done { 0.0 } else { tr[t + 1].value_est };
            let delta = tr[t].reward + 0.9 * next_v - tr[t].value_est;
            assert_relative_eq!(adv[t], delta, epsilon = 1e-12);
        }
    }

    #[test]
    fn gae_lambda_one_is_return_minus_value() {
        let rewards = [1.0, 2.0, -1.0, 0.5, 3.0];
        let values = [0.3, -0.2, 0.9, 0.1, 0.4];
        let tr = toy_transitions(&rewards, &values, &[false, false, false, false, true]);
        let gamma = 0.97;
        let (adv, _) = compute_gae(&tr, &GaeConfig { gamma, lam: 1.0 }, 0.0);
        for t in 0..5 {
            let rtg = discounted_return(&rewards[t..], gamma);
            assert_relative_eq!(adv[t], rtg - values[t], epsilon = 1e-12);
        }
    }

    /// Truncated forward summation of (gamma lam)^l delta_{t+l} within the
    /// episode, the definition the recursion must reproduce.
    fn gae_by_summation(tr: &[Transition], cfg: &GaeConfig, bootstrap: f64) -> Vec<f64> {
        let n = tr.len();
        let delta = |t: usize| {
            let next_v = if tr[t].done {
                0.0
            } else if t + 1 == n {
                bootstrap
            } else {
                tr[t + 1].value_est
            };
            tr[t].reward + cfg.gamma * next_v - tr[t].value_est
        };
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                let mut w = 1.0;
                for l in t..n {
                    acc += w * delta(l);
                    if tr[l].done {
                        break;
                    }
                    w *= cfg.gamma * cfg.lam;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gae_recursion_matches_summation_on_random_sequences() {
        let mut r = rng(42);
        for _ in 0..50 {
            let n = r.gen_range(1..40);
            let tr: Vec<Transition> = (0..n)
                .map(|i| Transition {
                    state: vec![0.0],
                    action: vec![0.0],
                    log_prob_old: 0.0,
                    reward: r.gen_range(-5.0..5.0),
                    value_est: r.gen_range(-2.0..2.0),
                    done: if i == n - 1 { r.gen_bool(0.5) } else { r.gen_bool(0.25) },
                })
                .collect();
            let cfg = GaeConfig { gamma: r.gen_range(0.5..1.0), lam: r.gen_range(0.0..1.0) };
            let bootstrap = r.gen_range(-1.0..1.0);
            let (adv, _) = compute_gae(&tr, &cfg, bootstrap);
            let oracle = gae_by_summation(&tr, &cfg, bootstrap);
            for t in 0..n {
                assert!(
                    (adv[t] - oracle[t]).abs() < 1e-12,
                    "t={t}: {} vs {}",
                    adv[t],
                    oracle[t]
                );
            }
        }
    }

    #[test]
    fn clipped_surrogate_fixtures() {
        assert_relative_eq!(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
        assert_relative_eq!(clipped_surrogate(1.0, -3.0, 0.05), -3.0);
        assert_relative_eq!(clipped_surrogate(1.5, 2.0, 0.2), 2.4);
        assert_relative_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    fn tiny_policy(seed: u64, actor_obs: usize, state: usize, act: usize) -> (PolicyParams, CriticParams) {
        let mut r = rng(seed);
        let actor =
            MlpParams::new(&[actor_obs, 16, act], Activation::Relu, Activation::Sigmoid, &mut r);
        let critic = MlpParams::new(&[state, 16, 1], Activation::Relu, Activation::Linear, &mut r);
        (
            PolicyParams { actor, log_std: DVector::from_element(act, -1.0) },
            CriticParams { value: critic },
        )
    }

    #[test]
    fn first_minibatch_has_unit_ratios() {
        let (mut policy, mut critic) = tiny_policy(1, 1, 1, 1);
        let mut env = BanditEnv { optimum: 0.7 };
        let mut r = rng(2);
        let batch = collect_rollouts(&mut env, &policy, &critic, 64, &mut r).unwrap();
        let (adv, ret) = compute_gae(&batch.transitions, &GaeConfig::default(), 0.0);
        // one epoch, one minibatch covering everything: every ratio is
        // computed against the unchanged collection policy
        let cfg = PpoConfig { epochs: 1, minibatch_size: 64, ..Default::default() };
        let mut updater = PpoUpdater::new(cfg, &policy, &critic, 3);
        let diag = updater
            .update(&mut policy, &mut critic, &batch.transitions, &adv, &ret)
            .unwrap();
        assert_relative_eq!(diag.mean_ratio, 1.0, epsilon = 1e-12);
        assert_eq!(diag.clip_fraction, 0.0);
    }

    #[test]
    fn critic_matching_returns_has_zero_loss() {
        let (mut policy, mut critic) = tiny_policy(4, 1, 1, 1);
        // zero the critic so it predicts exactly 0 everywhere
        for layer in critic.value.layers.iter_mut() {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let tr: Vec<Transition> = (0..8)
            .map(|_| Transition {
                state: vec![0.0],
                action: vec![0.5],
                log_prob_old: gaussian_log_prob(&[0.5], &[-1.0], &[0.5]),
                reward: 0.0,
                value_est: 0.0,
                done: true,
            })
            .collect();
        let adv = vec![0.0; 8];
        let ret = vec![0.0; 8];
        let cfg = PpoConfig { epochs: 1, minibatch_size: 8, ..Default::default() };
        let mut updater = PpoUpdater::new(cfg, &policy, &critic, 5);
        let diag = updater.update(&mut policy, &mut critic, &tr, &adv, &ret).unwrap();
        assert_eq!(diag.critic_loss, 0.0);
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let (policy, critic) = tiny_policy(7, 1, 1, 1);
        let mut env = BanditEnv { optimum: 0.7 };
        let a = collect_rollouts(&mut env, &policy, &critic, 32, &mut rng(9)).unwrap();
        let b = collect_rollouts(&mut env, &policy, &critic, 32, &mut rng(9)).unwrap();
        for (x, y) in a.transitions.iter().zip(&b.transitions) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.reward, y.reward);
            assert_eq!(x.log_prob_old.to_bits(), y.log_prob_old.to_bits());
        }
    }

    #[test]
    fn single_scenario_horizon_episode() {
        use crate::case::ieee14;
        use crate::env::{EnvConfig, GridEnv};
        let mut case = ieee14();
        for g in case.generators.iter_mut() {
            g.vg = g.vg.min(1.05);
        }
        let scenario = Scenario {
            pd: case.buses.iter().map(|b| b.pd).collect(),
            qd: case.buses.iter().map(|b| b.qd).collect(),
            pg0: case.generators.iter().map(|g| g.pg).collect(),
            vg0: case.generators.iter().map(|g| g.vg).collect(),
            pg_opt: None,
            vg_opt: None,
            cost_opt: None,
            z: None,
            feasible: true,
        };
        let env = GridEnv::new(case, EnvConfig::default()).unwrap();
        let mut rollout_env = GridRolloutEnv { env, scenarios: vec![scenario] };
        let (policy, critic) = tiny_policy(11, 28, 38, 10);
        let batch =
            collect_rollouts(&mut rollout_env, &policy, &critic, 5, &mut rng(13)).unwrap();
        // exactly one full episode of the configured horizon
        assert_eq!(batch.transitions.len(), 5);
        assert_eq!(batch.episodes, 1);
        assert!(batch.transitions[4].done);
        assert!(batch.transitions[..4].iter().all(|t| !t.done));
    }

    #[test]
    fn diverging_scenarios_fill_rollout_with_penalties() {
        use crate::case::ieee14;
        use crate::env::{EnvConfig, GridEnv};
        let case = ieee14();
        let mut scenario = Scenario {
            pd: case.buses.iter().map(|b| b.pd * 40.0).collect(),
            qd: case.buses.iter().map(|b| b.qd * 40.0).collect(),
            pg0: case.generators.iter().map(|g| g.pg.clamp(g.pmin, g.pmax)).collect(),
            vg0: vec![1.0; 5],
            pg_opt: None,
            vg_opt: None,
            cost_opt: None,
            z: None,
            feasible: false,
        };
        scenario.pd[0] = 0.0;
        let env = GridEnv::new(case, EnvConfig::default()).unwrap();
        let mut rollout_env = GridRolloutEnv { env, scenarios: vec![scenario] };
        let (policy, critic) = tiny_policy(15, 28, 38, 10);
        let batch =
            collect_rollouts(&mut rollout_env, &policy, &critic, 8, &mut rng(17)).unwrap();
        assert_eq!(batch.transitions.len(), 8);
        for t in &batch.transitions {
            assert_eq!(t.reward, crate::env::DIVERGENCE_PENALTY);
            assert!(t.done);
        }
    }

    #[test]
    fn bandit_policy_moves_toward_optimum() {
        let (mut policy, mut critic) = tiny_policy(21, 1, 1, 1);
        let mut env = BanditEnv { optimum: 0.7 };
        let cfg = PpoConfig {
            rollout_steps: 256,
            minibatch_size: 64,
            total_updates: 60,
            ..Default::default()
        };
        let report = train(
            &mut env,
            &mut policy,
            &mut critic,
            &cfg,
            &GaeConfig::default(),
            23,
            0,
            None,
            None,
        )
        .unwrap();
        assert!(!report.aborted);
        assert_eq!(report.rows.len(), 60);
        let mean = policy.actor.forward_one(&[0.0]).unwrap()[0];
        assert!((mean - 0.7).abs() < 0.2, "mean {mean} after 60 updates");
        // returns improved over training
        let early: f64 = report.rows[..5].iter().map(|r| r.mean_return).sum::<f64>() / 5.0;
        let late: f64 =
            report.rows[55..].iter().map(|r| r.mean_return).sum::<f64>() / 5.0;
        assert!(late > early, "late {late} vs early {early}");
    }

    #[test]
    fn non_finite_rewards_abort_and_restore() {
        // an absurd log_std overflows the squared bandit reward to -inf,
        // which must abort the run and restore the last finite parameters
        let (mut policy, mut critic) = tiny_policy(41, 1, 1, 1);
        policy.log_std = DVector::from_element(1, 400.0);
        let snapshot = policy.actor.clone();
        let mut env = BanditEnv { optimum: 0.7 };
        let cfg = PpoConfig {
            rollout_steps: 64,
            minibatch_size: 64,
            total_updates: 5,
            ..Default::default()
        };
        let report = train(
            &mut env,
            &mut policy,
            &mut critic,
            &cfg,
            &GaeConfig::default(),
            2,
            0,
            None,
            None,
        )
        .unwrap();
        assert!(report.aborted);
        assert!(policy.actor.validate().is_ok());
        for (a, b) in snapshot.layers.iter().zip(&policy.actor.layers) {
            assert_eq!(a.w, b.w);
        }
    }

    #[test]
    fn optimizer_state_round_trips_through_checkpoint_data() {
        let (mut policy, mut critic) = tiny_policy(43, 1, 1, 1);
        let mut env = BanditEnv { optimum: 0.7 };
        let cfg = PpoConfig {
            rollout_steps: 64,
            minibatch_size: 64,
            total_updates: 3,
            ..Default::default()
        };
        let report = train(
            &mut env,
            &mut policy,
            &mut critic,
            &cfg,
            &GaeConfig::default(),
            3,
            0,
            None,
            None,
        )
        .unwrap();
        let json = serde_json::to_string(&report.optimizer).unwrap();
        let data: crate::ckpt::OptimizerData = serde_json::from_str(&json).unwrap();
        let mut updater = PpoUpdater::new(cfg, &policy, &critic, 9);
        updater.restore_optimizer(&data, &policy, &critic);
        assert_eq!(
            serde_json::to_string(&updater.optimizer_data()).unwrap(),
            json
        );
    }

    #[test]
    fn zero_updates_leaves_policy_unchanged() {
        let (mut policy, mut critic) = tiny_policy(31, 1, 1, 1);
        let snapshot = policy.clone();
        let mut env = BanditEnv { optimum: 0.7 };
        let cfg = PpoConfig { total_updates: 0, ..Default::default() };
        let report = train(
            &mut env,
            &mut policy,
            &mut critic,
            &cfg,
            &GaeConfig::default(),
            1,
            0,
            None,
            None,
        )
        .unwrap();
        assert!(report.rows.is_empty());
        for (a, b) in snapshot.actor.layers.iter().zip(&policy.actor.layers) {
            assert_eq!(a.w, b.w);
        }
    }
}
