//! Recurrent PPO: rollout collection, generalized advantage estimation, the
//! clipped surrogate loss and the minibatched update with truncated
//! backpropagation through time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::AxisParams;
use crate::env::{EpisodeConfig, Observation, RewardConfig, VibrationEnv};
use crate::error::{Error, Result};
use crate::neural::{self, Network, OutputGrad, ParamSet, RecurrentState, StepCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient step `theta -= lr * grad`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    /// Entropy coefficient at the start of training, decayed linearly to `entropy_coef_final`.
    pub entropy_coef: f64,
    pub entropy_coef_final: f64,
    pub value_coef: f64,
    /// The value head predicts returns divided by this factor.
    pub value_scale: f64,
    /// Bootstrap across the fixed horizon instead of treating it as terminal.
    pub bootstrap_time_limit: bool,
    /// Learning rate at the start of training, decayed linearly to `learning_rate_final`.
    pub learning_rate: f64,
    pub learning_rate_final: f64,
    pub epochs: usize,
    pub n_envs: usize,
    /// Steps per environment per rollout.
    pub n_steps: usize,
    /// Truncated-backpropagation window.
    pub seq_len: usize,
    /// Minibatches per epoch.
    pub minibatches: usize,
    pub total_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Divergence guard: remaining epochs of a rollout are skipped once the
    /// approximate KL of a minibatch exceeds this.
    pub max_kl: Option<f64>,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            entropy_coef_final: 0.001,
            value_coef: 0.5,
            value_scale: 100.0,
            bootstrap_time_limit: true,
            learning_rate: 3e-4,
            learning_rate_final: 0.0,
            epochs: 4,
            n_envs: 8,
            n_steps: 256,
            seq_len: 64,
            minibatches: 4,
            total_steps: 300_000,
            max_grad_norm: Some(0.5),
            max_kl: Some(0.05),
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("ppo.{name} must be in [0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda_gae", self.lambda_gae)?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!("ppo.clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("entropy_coef_final", self.entropy_coef_final),
            ("value_coef", self.value_coef),
            ("value_scale", self.value_scale),
            ("learning_rate", self.learning_rate),
            ("learning_rate_final", self.learning_rate_final),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("ppo.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.value_scale == 0.0 {
            return Err(Error::Config("ppo.value_scale must be > 0".into()));
        }
        if self.epochs == 0 || self.n_envs == 0 || self.n_steps == 0 || self.seq_len == 0 || self.minibatches == 0 {
            return Err(Error::Config(
                "ppo.epochs, n_envs, n_steps, seq_len and minibatches must be >= 1".into(),
            ));
        }
        if self.n_steps % self.seq_len != 0 {
            return Err(Error::Config(format!(
                "ppo.n_steps ({}) must be a multiple of ppo.seq_len ({})",
                self.n_steps, self.seq_len
            )));
        }
        let n_seqs = self.n_envs * self.n_steps / self.seq_len;
        if self.minibatches > n_seqs {
            return Err(Error::Config(format!(
                "ppo.minibatches ({}) exceeds the {n_seqs} sequences in a rollout",
                self.minibatches
            )));
        }
        if self.total_steps != 0 && self.total_steps < self.rollout_steps() {
            return Err(Error::Config(format!(
                "ppo.total_steps ({}) is shorter than one rollout ({})",
                self.total_steps,
                self.rollout_steps()
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("ppo.max_grad_norm must be > 0".into()));
            }
        }
        if let Some(k) = self.max_kl {
            if !(k > 0.0) {
                return Err(Error::Config("ppo.max_kl must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Environment steps gathered per rollout across all environments.
    pub fn rollout_steps(&self) -> u64 {
        (self.n_envs * self.n_steps) as u64
    }

    fn progress(&self, steps_done: u64) -> f64 {
        if self.total_steps == 0 {
            1.0
        } else {
            (steps_done as f64 / self.total_steps as f64).min(1.0)
        }
    }

    /// Linearly decayed learning rate after `steps_done` environment steps.
    pub fn learning_rate_at(&self, steps_done: u64) -> f64 {
        let p = self.progress(steps_done);
        self.learning_rate + (self.learning_rate_final - self.learning_rate) * p
    }

    pub fn entropy_coef_at(&self, steps_done: u64) -> f64 {
        let p = self.progress(steps_done);
        self.entropy_coef + (self.entropy_coef_final - self.entropy_coef) * p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    /// Normalized network input.
    pub features: Vec<f64>,
    /// Raw (unclamped) Gaussian sample.
    pub action: Vec<f64>,
    pub reward: f64,
    pub log_prob: f64,
    pub value: f64,
    /// Episode ended with this step.
    pub done: bool,
    /// Value of the observation reached by the final step of an episode,
    /// for bootstrapping across the time limit.
    pub final_value: Option<f64>,
    /// First step of an episode; the recurrent state was zeroed before it.
    pub episode_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvTrajectory {
    pub steps: Vec<StepRecord>,
    /// Recurrent state before step `k * seq_len`.
    pub seq_states: Vec<RecurrentState>,
    /// Value of the observation following the last step.
    pub bootstrap_value: f64,
}

impl EnvTrajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.value).collect()
    }

    pub fn dones(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.done).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub envs: Vec<EnvTrajectory>,
    pub seq_len: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub env: usize,
    pub episode: u64,
    pub episode_return: f64,
}

/// A set of environments with their carried observation and recurrent state.
pub struct EnvPool {
    envs: Vec<VibrationEnv>,
    obs: Vec<Observation>,
    states: Vec<RecurrentState>,
    episode_start: Vec<bool>,
    rngs: Vec<ChaCha8Rng>,
    returns: Vec<f64>,
    completed: Vec<EpisodeRecord>,
}

/// Seed of environment `index` in a pool seeded with `seed`.
pub fn env_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl EnvPool {
    pub fn new(
        n_envs: usize,
        params: AxisParams,
        episode: &EpisodeConfig,
        reward: RewardConfig,
        lstm_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut envs = Vec::with_capacity(n_envs);
        let mut obs = Vec::with_capacity(n_envs);
        let mut rngs = Vec::with_capacity(n_envs);
        for i in 0..n_envs {
            let cfg = EpisodeConfig {
                seed: env_seed(episode.seed, i),
                ..episode.clone()
            };
            let mut env = VibrationEnv::new(params, cfg, reward)?;
            obs.push(env.reset()?.0);
            envs.push(env);
            let mut rng = ChaCha8Rng::seed_from_u64(env_seed(seed, i));
            rng.set_stream(1);
            rngs.push(rng);
        }
        Ok(Self {
            envs,
            obs,
            states: vec![RecurrentState::zeros(lstm_width); n_envs],
            episode_start: vec![true; n_envs],
            rngs,
            returns: vec![0.0; n_envs],
            completed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[VibrationEnv] {
        &self.envs
    }

    /// Completed episodes in completion order.
    pub fn completed(&self) -> &[EpisodeRecord] {
        &self.completed
    }
}

/// Run the policy for `n_steps` in every environment of the pool.
pub fn collect_rollout(
    pool: &mut EnvPool,
    net: &Network,
    params: &ParamSet,
    n_steps: usize,
    seq_len: usize,
    value_scale: f64,
) -> Result<Trajectory> {
    net.check_params(params)?;
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be >= 1".into()));
    }
    let log_std = net.log_std(params).to_vec();
    let bound = net.spec().action_scale;
    let mut cache = StepCache::default();
    let mut envs = Vec::with_capacity(pool.len());
    for i in 0..pool.len() {
        let mut steps = Vec::with_capacity(n_steps);
        let mut seq_states = Vec::new();
        for t in 0..n_steps {
            if t % seq_len == 0 {
                seq_states.push(pool.states[i].clone());
            }
            let env = &mut pool.envs[i];
            let obs = pool.obs[i];
            let features = env.features(&obs).to_vec();
            net.step(params, &features, &mut pool.states[i], &mut cache);
            if !cache.value.is_finite() || cache.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite {
                    node: format!("policy output in env {i} at rollout step {t}"),
                });
            }
            let (raw, log_prob, clamped) = neural::sample_action(&cache.mean, &log_std, bound, &mut pool.rngs[i]);
            let tr = env.step(clamped[0])?;
            pool.returns[i] += tr.reward;
            let final_value = if tr.done {
                let features = env.features(&tr.obs);
                let mut state = pool.states[i].clone();
                net.step(params, &features, &mut state, &mut cache);
                Some(cache.value * value_scale)
            } else {
                None
            };
            steps.push(StepRecord {
                obs,
                features,
                action: raw,
                reward: tr.reward,
                log_prob,
                value: cache.value * value_scale,
                done: tr.done,
                final_value,
                episode_start: pool.episode_start[i],
            });
            pool.episode_start[i] = false;
            if tr.done {
                pool.completed.push(EpisodeRecord {
                    env: i,
                    episode: env.next_episode_index() - 1,
                    episode_return: pool.returns[i],
                });
                pool.returns[i] = 0.0;
                pool.obs[i] = env.reset()?.0;
                pool.states[i] = net.zero_state();
                pool.episode_start[i] = true;
            } else {
                pool.obs[i] = tr.obs;
            }
        }
        let bootstrap_value = if n_steps == 0 {
            0.0
        } else {
            let features = pool.envs[i].features(&pool.obs[i]);
            let mut state = pool.states[i].clone();
            net.step(params, &features, &mut state, &mut cache);
            cache.value * value_scale
        };
        envs.push(EnvTrajectory {
            steps,
            seq_states,
            bootstrap_value,
        });
    }
    Ok(Trajectory { envs, seq_len })
}

/// Generalized advantage estimation for one environment's steps. `dones[t]`
/// marks an episode ending at step `t`; the estimate does not bootstrap across it.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::Shape(format!(
            "gae: {} rewards, {} values, {} done flags",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { bootstrap_value } else { values[t + 1] };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// A rollout with advantages and return targets attached.
#[derive(Debug, Clone)]
pub struct PreparedRollout {
    pub trajectory: Trajectory,
    /// Per environment, per step.
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl PreparedRollout {
    /// Episode ends are terminal: nothing is bootstrapped across them.
    pub fn new(trajectory: Trajectory, gamma: f64, lambda: f64) -> Result<Self> {
        Self::build(trajectory, gamma, lambda, false)
    }

    /// Episode ends are time-limit truncations: the value of the final
    /// observation stands in for the unseen remainder of the episode.
    pub fn truncated(trajectory: Trajectory, gamma: f64, lambda: f64) -> Result<Self> {
        Self::build(trajectory, gamma, lambda, true)
    }

    fn build(trajectory: Trajectory, gamma: f64, lambda: f64, bootstrap_ends: bool) -> Result<Self> {
        let mut advantages = Vec::with_capacity(trajectory.envs.len());
        let mut returns = Vec::with_capacity(trajectory.envs.len());
        for e in &trajectory.envs {
            let mut rewards = e.rewards();
            if bootstrap_ends {
                for (r, s) in rewards.iter_mut().zip(&e.steps) {
                    if let (true, Some(v)) = (s.done, s.final_value) {
                        *r += gamma * v;
                    }
                }
            }
            let (a, r) = gae(&rewards, &e.values(), &e.dones(), e.bootstrap_value, gamma, lambda)?;
            advantages.push(a);
            returns.push(r);
        }
        Ok(Self {
            trajectory,
            advantages,
            returns,
        })
    }

    /// Shift and scale advantages to zero mean and unit standard deviation.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.iter().map(Vec::len).sum::<usize>();
        if n < 2 {
            return;
        }
        let mean = self.advantages.iter().flatten().sum::<f64>() / n as f64;
        let var = self.advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt() + 1e-8;
        for a in self.advantages.iter_mut().flatten() {
            *a = (*a - mean) / std;
        }
    }

    /// Every truncation window of the rollout.
    pub fn sequences(&self) -> Vec<SeqRef> {
        let mut out = Vec::new();
        let seq_len = self.trajectory.seq_len;
        for (env, e) in self.trajectory.envs.iter().enumerate() {
            let mut start = 0;
            while start < e.steps.len() {
                let len = seq_len.min(e.steps.len() - start);
                out.push(SeqRef { env, start, len });
                start += len;
            }
        }
        out
    }
}

/// A window `[start, start + len)` of one environment's steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqRef {
    pub env: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub value_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossDiagnostics {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

/// Per-sample clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`
/// and its derivative with respect to `log pi_new`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// PPO loss over a minibatch of sequences. When `grads` is given, the
/// gradient of the returned loss is accumulated into it.
///
/// `loss = -mean(min(rho A, clip(rho) A)) + value_coef mean((V - R)^2) - entropy_coef H`
pub fn ppo_loss(
    net: &Network,
    params: &ParamSet,
    rollout: &PreparedRollout,
    batch: &[SeqRef],
    coefs: LossCoefs,
    mut grads: Option<&mut ParamSet>,
) -> Result<LossDiagnostics> {
    let n: usize = batch.iter().map(|s| s.len).sum();
    if n == 0 {
        return Ok(LossDiagnostics::default());
    }
    let inv_n = 1.0 / n as f64;
    let log_std = net.log_std(params).to_vec();
    let act_dim = log_std.len();
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut d_log_std = vec![0.0; act_dim];
    let mut diag = LossDiagnostics {
        samples: n,
        ..LossDiagnostics::default()
    };
    let mut clipped = 0usize;

    for seq in batch {
        let env = &rollout.trajectory.envs[seq.env];
        let steps = &env.steps[seq.start..seq.start + seq.len];
        let init = &env.seq_states[seq.start / rollout.trajectory.seq_len];
        let obs: Vec<Vec<f64>> = steps.iter().map(|s| s.features.clone()).collect();
        let resets: Vec<bool> = steps.iter().map(|s| s.episode_start).collect();
        let (out, tape) = net.forward(params, &obs, &resets, init)?;

        let mut out_grads = Vec::with_capacity(seq.len);
        for (k, step) in steps.iter().enumerate() {
            let t = seq.start + k;
            let adv = rollout.advantages[seq.env][t];
            let ret = rollout.returns[seq.env][t];
            let mean = &out.means[k * act_dim..(k + 1) * act_dim];
            let lp = neural::log_prob(&step.action, mean, &log_std);
            let log_ratio = lp - step.log_prob;
            let ratio = log_ratio.exp();
            let (surr, d_surr) = clipped_surrogate(ratio, adv, coefs.clip_eps);
            diag.policy_loss -= surr * inv_n;
            diag.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
            if (ratio - 1.0).abs() > coefs.clip_eps {
                clipped += 1;
            }
            // value loss in units of the value head's output
            let v_err = out.values[k] - ret / coefs.value_scale;
            diag.value_loss += v_err * v_err * inv_n;

            // d(-surr)/d(lp) = -d_surr ; dlp/dmean = (a - mu)/sigma^2 ; dlp/dlog_std = z^2 - 1
            let d_lp = -d_surr * inv_n;
            let mut d_mean = vec![0.0; act_dim];
            for j in 0..act_dim {
                let diff = step.action[j] - mean[j];
                d_mean[j] = d_lp * diff * inv_var[j];
                d_log_std[j] += d_lp * (diff * diff * inv_var[j] - 1.0);
            }
            out_grads.push(OutputGrad {
                d_mean,
                d_value: 2.0 * coefs.value_coef * v_err * inv_n,
            });
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward(params, &tape, &out_grads, &vec![0.0; act_dim], g)?;
        }
    }
    diag.entropy = neural::entropy(&log_std);
    diag.clip_fraction = clipped as f64 / n as f64;
    diag.loss = diag.policy_loss + coefs.value_coef * diag.value_loss - coefs.entropy_coef * diag.entropy;
    if !diag.loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{diag:?}")));
    }
    if let Some(g) = grads {
        // entropy is state independent: dH/dlog_std = 1 per dimension
        let off = net.log_std_offset();
        for j in 0..act_dim {
            g.data[off + j] += d_log_std[j] - coefs.entropy_coef;
        }
        if let Some((name, i)) = g.first_non_finite() {
            return Err(Error::NonFinite {
                node: format!("gradient of {name} (index {i})"),
            });
        }
    }
    Ok(diag)
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: &PpoConfig, n_params: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Descend the loss gradient `grads` with step size `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.data.iter_mut().zip(&grads.data) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (k, (p, g)) in params.data.iter_mut().zip(&grads.data).enumerate() {
                    self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                    self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[k] / bc1;
                    let v_hat = self.v[k] / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches_run: usize,
    /// The divergence guard cut the update short.
    pub stopped_early: bool,
}

/// Optimize `params` on one prepared rollout. `steps_done` sets the
/// position on the learning-rate and entropy schedules; `update_index`
/// seeds the minibatch shuffle.
pub fn update(
    net: &Network,
    params: &mut ParamSet,
    optimizer: &mut Optimizer,
    rollout: &mut PreparedRollout,
    cfg: &PpoConfig,
    steps_done: u64,
    update_index: u64,
) -> Result<UpdateStats> {
    rollout.normalize_advantages();
    let lr = cfg.learning_rate_at(steps_done);
    let coefs = LossCoefs {
        clip_eps: cfg.clip_eps,
        value_coef: cfg.value_coef,
        entropy_coef: cfg.entropy_coef_at(steps_done),
        value_scale: cfg.value_scale,
    };
    let mut stats = UpdateStats {
        learning_rate: lr,
        entropy_coef: coefs.entropy_coef,
        ..UpdateStats::default()
    };
    let mut seqs = rollout.sequences();
    if seqs.is_empty() {
        return Ok(stats);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed(cfg.seed, usize::MAX));
    rng.set_stream(update_index);
    let n_mb = cfg.minibatches.min(seqs.len());
    let mut grads = params.zeros_like();

    'epochs: for _ in 0..cfg.epochs {
        seqs.shuffle(&mut rng);
        for mb in 0..n_mb {
            let lo = mb * seqs.len() / n_mb;
            let hi = (mb + 1) * seqs.len() / n_mb;
            grads.fill(0.0);
            let d = ppo_loss(net, params, rollout, &seqs[lo..hi], coefs, Some(&mut grads))?;
            let norm = grads.norm();
            if let Some(max) = cfg.max_grad_norm {
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            optimizer.step(params, &grads, lr);

            stats.minibatches_run += 1;
            stats.loss += d.loss;
            stats.policy_loss += d.policy_loss;
            stats.value_loss += d.value_loss;
            stats.entropy = d.entropy;
            stats.approx_kl += d.approx_kl;
            stats.clip_fraction += d.clip_fraction;
            stats.grad_norm += norm;
            if cfg.max_kl.is_some_and(|k| d.approx_kl > k) {
                stats.stopped_early = true;
                break 'epochs;
            }
        }
    }
    let k = stats.minibatches_run as f64;
    stats.loss /= k;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    stats.entropy = neural::entropy(net.log_std(params));
    Ok(stats)
}

/// Metrics of one rollout-plus-update iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    /// Environment steps after this iteration.
    pub step: u64,
    /// Mean return of the last (up to) 50 completed episodes; `None` before the first.
    pub mean_episode_reward: Option<f64>,
    pub episodes: usize,
    pub update: UpdateStats,
}

/// Window of the episode-return moving average.
pub const RETURN_WINDOW: usize = 50;

/// Training loop state: network, parameters, optimizer and environments.
pub struct Trainer {
    pub cfg: PpoConfig,
    pub net: Network,
    pub params: ParamSet,
    optimizer: Optimizer,
    pool: EnvPool,
    steps_done: u64,
    iterations: u64,
}

impl Trainer {
    pub fn new(
        cfg: PpoConfig,
        net: Network,
        params: ParamSet,
        axis: AxisParams,
        episode: &EpisodeConfig,
        reward: RewardConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        net.check_params(&params)?;
        let pool = EnvPool::new(cfg.n_envs, axis, episode, reward, net.spec().lstm, cfg.seed)?;
        let optimizer = Optimizer::new(&cfg, net.n_params());
        Ok(Self {
            cfg,
            net,
            params,
            optimizer,
            pool,
            steps_done: 0,
            iterations: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    /// True once another full rollout would exceed `total_steps`.
    pub fn finished(&self) -> bool {
        self.steps_done + self.cfg.rollout_steps() > self.cfg.total_steps
    }

    pub fn completed_episodes(&self) -> &[EpisodeRecord] {
        self.pool.completed()
    }

    /// Collect one rollout and update on it.
    pub fn iterate(&mut self) -> Result<IterationMetrics> {
        let traj = collect_rollout(
            &mut self.pool,
            &self.net,
            &self.params,
            self.cfg.n_steps,
            self.cfg.seq_len,
            self.cfg.value_scale,
        )?;
        let mut rollout = if self.cfg.bootstrap_time_limit {
            PreparedRollout::truncated(traj, self.cfg.gamma, self.cfg.lambda_gae)?
        } else {
            PreparedRollout::new(traj, self.cfg.gamma, self.cfg.lambda_gae)?
        };
        let stats = update(
            &self.net,
            &mut self.params,
            &mut self.optimizer,
            &mut rollout,
            &self.cfg,
            self.steps_done,
            self.iterations,
        )?;
        self.steps_done += self.cfg.rollout_steps();
        self.iterations += 1;
        let done = self.pool.completed();
        let recent = &done[done.len().saturating_sub(RETURN_WINDOW)..];
        let mean_episode_reward = if recent.is_empty() {
            None
        } else {
            Some(recent.iter().map(|e| e.episode_return).sum::<f64>() / recent.len() as f64)
        };
        Ok(IterationMetrics {
            step: self.steps_done,
            mean_episode_reward,
            episodes: done.len(),
            update: stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::NetworkSpec;
    use proptest::prelude::*;

    fn small_setup(n_envs: usize, n_steps: usize, seq_len: usize) -> (PpoConfig, Network, ParamSet, EnvPool) {
        let cfg = PpoConfig {
            n_envs,
            n_steps,
            seq_len,
            minibatches: 1,
            total_steps: 10_000,
            seed: 3,
            ..PpoConfig::default()
        };
        let mut spec = NetworkSpec::tiny(crate::env::OBS_DIM);
        spec.mean_head_gain = 0.5;
        let net = Network::new(spec).unwrap();
        let params = net.init_params(1);
        let episode = EpisodeConfig {
            horizon: 20,
            seed: 4,
            ..EpisodeConfig::default()
        };
        let pool = EnvPool::new(n_envs, AxisParams::default(), &episode, RewardConfig::default(), 3, 5).unwrap();
        (cfg, net, params, pool)
    }

    fn brute_force_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
        (0..rewards.len())
            .map(|t| (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum())
            .collect()
    }

    #[test]
    fn gae_lambda_one_zero_values_is_discounted_return() {
        let rewards: Vec<f64> = (0..30).map(|t| if t % 4 == 0 { 0.0 } else { -1.0 }).collect();
        let n = rewards.len();
        let (adv, ret) = gae(&rewards, &vec![0.0; n], &vec![false; n], 0.0, 0.97, 1.0).unwrap();
        let bf = brute_force_returns(&rewards, 0.97);
        for t in 0..n {
            assert!((adv[t] - bf[t]).abs() < 1e-10);
            assert_eq!(adv[t], ret[t]);
        }
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [-1.0, 0.0, -1.0, -1.0];
        let values = [0.5, -0.2, 1.0, 0.3];
        let dones = [false, true, false, false];
        let (adv, _) = gae(&rewards, &values, &dones, 0.7, 0.9, 0.0).unwrap();
        let expected = [
            -1.0 + 0.9 * -0.2 - 0.5,
            0.0 - (-0.2),
            -1.0 + 0.9 * 0.3 - 1.0,
            -1.0 + 0.9 * 0.7 - 0.3,
        ];
        for t in 0..4 {
            assert!((adv[t] - expected[t]).abs() < 1e-14);
        }
    }

    #[test]
    fn gae_zero_rewards() {
        let (adv, _) = gae(&[0.0; 10], &[0.0; 10], &[false; 10], 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gae_misaligned() {
        assert!(gae(&[0.0; 3], &[0.0; 2], &[false; 3], 0.0, 0.99, 0.95).is_err());
    }

    #[test]
    fn gae_resets_at_boundaries() {
        let rewards = [-1.0, -1.0, -1.0, -1.0];
        let dones = [false, true, false, false];
        let (adv, _) = gae(&rewards, &[0.0; 4], &dones, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(adv[1], -1.0);
        assert_eq!(adv[0], -1.5);
        assert_eq!(adv[3], -1.0);
        assert_eq!(adv[2], -1.5);
    }

    #[test]
    fn surrogate_hand_values() {
        let (s, d) = clipped_surrogate(1.5, 2.0, 0.2);
        assert!((s - 2.4).abs() < 1e-15);
        assert_eq!(d, 0.0);
        let (s, d) = clipped_surrogate(1.0, -3.0, 0.2);
        assert_eq!((s, d), (-3.0, -3.0));
    }

    #[test]
    fn empty_rollout() {
        let (_, net, params, mut pool) = small_setup(2, 0, 4);
        let traj = collect_rollout(&mut pool, &net, &params, 0, 4, 1.0).unwrap();
        assert!(traj.is_empty());
    }

    #[test]
    fn rollout_is_deterministic_and_two_valued() {
        let (_, net, params, mut a) = small_setup(3, 48, 16);
        let (_, _, _, mut b) = small_setup(3, 48, 16);
        let ta = collect_rollout(&mut a, &net, &params, 48, 16, 1.0).unwrap();
        let tb = collect_rollout(&mut b, &net, &params, 48, 16, 1.0).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 3 * 48);
        for e in &ta.envs {
            assert_eq!(e.seq_states.len(), 3);
            assert!(e.steps.iter().all(|s| s.reward == 0.0 || s.reward == -1.0));
            // horizon 20 inside 48 steps: episode starts at 0, 20, 40
            let starts: Vec<usize> = e.steps.iter().enumerate().filter(|(_, s)| s.episode_start).map(|(i, _)| i).collect();
            assert_eq!(starts, vec![0, 20, 40]);
        }
        assert_eq!(a.completed().len(), 6);
    }

    #[test]
    fn no_update_point_surrogate_is_minus_mean_advantage() {
        let (cfg, net, params, mut pool) = small_setup(2, 32, 16);
        let traj = collect_rollout(&mut pool, &net, &params, 32, 16, 1.0).unwrap();
        let mut rollout = PreparedRollout::new(traj, cfg.gamma, cfg.lambda_gae).unwrap();
        rollout.normalize_advantages();
        let seqs = rollout.sequences();
        let coefs = LossCoefs { clip_eps: 0.2, value_coef: 0.0, entropy_coef: 0.0, value_scale: 1.0 };
        let d = ppo_loss(&net, &params, &rollout, &seqs, coefs, None).unwrap();
        let mean_adv = rollout.advantages.iter().flatten().sum::<f64>() / 64.0;
        assert!((d.policy_loss + mean_adv).abs() < 1e-9, "{} vs {}", d.policy_loss, mean_adv);
        assert!(d.approx_kl.abs() < 1e-12);
        assert_eq!(d.clip_fraction, 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (mut cfg, net, params, mut pool) = small_setup(2, 32, 16);
        cfg.learning_rate = 0.0;
        cfg.learning_rate_final = 0.0;
        let traj = collect_rollout(&mut pool, &net, &params, 32, 16, 1.0).unwrap();
        let mut rollout = PreparedRollout::new(traj, cfg.gamma, cfg.lambda_gae).unwrap();
        let mut p = params.clone();
        let mut opt = Optimizer::new(&cfg, net.n_params());
        update(&net, &mut p, &mut opt, &mut rollout, &cfg, 0, 0).unwrap();
        assert_eq!(p, params);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = PpoConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 3e-4);
        assert_eq!(cfg.learning_rate_at(cfg.total_steps), 0.0);
        assert_eq!(cfg.learning_rate_at(cfg.total_steps * 2), 0.0);
        assert!((cfg.entropy_coef_at(cfg.total_steps) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        PpoConfig::default().validate().unwrap();
        assert!(PpoConfig { gamma: 1.5, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { n_steps: 100, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { total_steps: 10, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { total_steps: 0, ..PpoConfig::default() }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn clipped_never_exceeds_unclipped(ratio in 0.0f64..3.0, adv in -5.0f64..5.0, eps in 0.05f64..0.5) {
            let (s, _) = clipped_surrogate(ratio, adv, eps);
            prop_assert!(s <= ratio * adv + 1e-15);
        }
    }
}
