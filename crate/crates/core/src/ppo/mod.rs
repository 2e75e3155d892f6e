//! PPO fine-tuning: rollouts with a per-step KL penalty, GAE, critic
//! regression and clipped actor updates.

mod gae;
mod loss;
mod rollout;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FrozenPolicy, Policy, Role, ValueHead};
use crate::reward::{KlReference, RewardModel};
use crate::scalar::Scalar;
use crate::seeds;
use crate::world::PromptSet;

pub use gae::{compute_gae, normalize as normalize_advantages};
pub use loss::{actor_loss_and_grad, critic_loss_and_grad, surrogate_term, ActorStats};
pub use rollout::{collect_rollouts, BatchStats, RolloutBatch, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_coefficient: f64,
    pub kl_reference: KlReference,
    pub rollout_buffer_size: usize,
    pub train_batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub critic_warmup_buffers: usize,
    pub inner_epochs: usize,
    /// Passes over the PPO prompt set; sets the iteration count to
    /// `ceil(episodes · |P| / rollout_buffer_size)` unless `iterations` is given.
    pub episodes: usize,
    pub iterations: Option<usize>,
    pub advantage_normalization: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            kl_coefficient: 0.2,
            kl_reference: KlReference::Sft,
            rollout_buffer_size: 256,
            train_batch_size: 64,
            actor_lr: 1.0,
            critic_lr: 1.0,
            critic_warmup_buffers: 5,
            inner_epochs: 1,
            episodes: 2,
            iterations: None,
            advantage_normalization: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.kl_coefficient >= 0.0) {
            return bad("kl_coefficient must be >= 0");
        }
        if self.rollout_buffer_size == 0 || self.train_batch_size == 0 {
            return bad("rollout_buffer_size and train_batch_size must be >= 1");
        }
        if !self.rollout_buffer_size.is_multiple_of(self.train_batch_size) {
            return bad("rollout_buffer_size must be divisible by train_batch_size");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("actor_lr and critic_lr must be > 0");
        }
        if !(1..=4).contains(&self.inner_epochs) {
            return bad("inner_epochs must lie in 1..=4");
        }
        Ok(())
    }

    pub fn num_iterations(&self, prompts: usize) -> usize {
        self.iterations
            .unwrap_or_else(|| (self.episodes * prompts).div_ceil(self.rollout_buffer_size))
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub kl_to_ref: f64,
    pub clip_frac: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

/// Critic-only iteration before actor training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub buffer: usize,
    pub critic_loss: f64,
}

fn shuffled_minibatches(len: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeds::rng(seed));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Minibatched gradient steps on the critic MSE; returns the loss over the
/// whole batch before any step.
pub fn critic_update<F: Scalar>(
    head: &mut ValueHead<F>,
    batch: &RolloutBatch<F>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<f64> {
    let all: Vec<&Trajectory<F>> = batch.trajectories.iter().collect();
    let (pre, _) = critic_loss_and_grad(head, &all);
    if !pre.is_finite() {
        return Err(Error::training("critic_update", batch.snapshot_id, format!("critic loss {pre}")));
    }
    let lr = F::of(cfg.critic_lr);
    for epoch in 0..cfg.inner_epochs {
        for mb in shuffled_minibatches(all.len(), cfg.train_batch_size, seeds::derive(seed, epoch as u64)) {
            let trajs: Vec<&Trajectory<F>> = mb.iter().map(|&i| all[i]).collect();
            let (_, grad) = critic_loss_and_grad(head, &trajs);
            head.apply(&grad, -lr);
        }
    }
    Ok(pre.as_f64())
}

/// Diagnostics of one actor update over a buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorUpdate {
    /// Loss over the whole buffer before any step.
    pub loss: f64,
    pub clip_frac: f64,
    pub mean_ratio: f64,
}

/// Minibatched gradient steps on the clipped surrogate. Clip statistics are
/// averaged over the minibatches as they were visited.
pub fn actor_update<F: Scalar>(
    actor: &mut Policy<F>,
    batch: &RolloutBatch<F>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<ActorUpdate> {
    let all: Vec<&Trajectory<F>> = batch.trajectories.iter().collect();
    let lr = F::of(cfg.actor_lr);
    let mut pre = None;
    let (mut clip, mut ratio, mut count) = (0.0, 0.0, 0usize);
    for epoch in 0..cfg.inner_epochs {
        for mb in shuffled_minibatches(all.len(), cfg.train_batch_size, seeds::derive(seed, epoch as u64)) {
            let trajs: Vec<&Trajectory<F>> = mb.iter().map(|&i| all[i]).collect();
            let stats = actor_loss_and_grad(actor, &trajs, cfg.clip_epsilon)?;
            if pre.is_none() {
                pre = Some(actor_loss_and_grad(actor, &all, cfg.clip_epsilon)?.loss.as_f64());
            }
            clip += stats.clip_frac;
            ratio += stats.mean_ratio;
            count += 1;
            actor.apply(&stats.gradient, -lr);
        }
    }
    let loss = pre.unwrap_or(0.0);
    if !loss.is_finite() {
        return Err(Error::training("actor_update", batch.snapshot_id, format!("actor loss {loss}")));
    }
    Ok(ActorUpdate {
        loss,
        clip_frac: clip / count.max(1) as f64,
        mean_ratio: ratio / count.max(1) as f64,
    })
}

#[derive(Clone, Debug)]
pub struct PpoOutcome<F> {
    pub actor: FrozenPolicy<F>,
    pub critic: ValueHead<F>,
    pub metrics: Vec<IterationMetrics>,
    pub warmup: Vec<WarmupRecord>,
}

/// Inputs of a PPO run beyond its configuration.
pub struct PpoInputs<'a, F> {
    pub sft: &'a FrozenPolicy<F>,
    /// KL anchor `p_ref`.
    pub reference: &'a FrozenPolicy<F>,
    pub reward: &'a dyn RewardModel<F>,
    pub prompts: &'a PromptSet,
    pub max_len: usize,
}

/// Runs critic warmup (actor frozen) followed by alternating
/// collect → GAE → critic update → actor update.
pub fn run_ppo<F: Scalar>(inputs: PpoInputs<'_, F>, cfg: &PpoConfig) -> Result<PpoOutcome<F>> {
    cfg.validate()?;
    if inputs.prompts.is_empty() {
        return Err(Error::Config("PPO prompt set is empty".into()));
    }
    let mut actor = inputs.sft.thaw(Role::Actor);
    actor.push_lineage("ppo", cfg.seed);
    let mut critic = ValueHead::from_policy_trunk(&actor)?;
    let iterations = cfg.num_iterations(inputs.prompts.len());
    let gamma = F::of(cfg.gamma);
    let lambda = F::of(cfg.gae_lambda);
    let mut warmup = Vec::new();
    let mut metrics = Vec::with_capacity(iterations);
    if iterations == 0 {
        return Ok(PpoOutcome {
            actor: actor.clone_frozen(),
            critic,
            metrics,
            warmup,
        });
    }

    let collect = |snapshot: &FrozenPolicy<F>, seed: u64, id: usize| {
        collect_rollouts(
            snapshot,
            inputs.reward,
            inputs.reference,
            inputs.prompts,
            cfg.rollout_buffer_size,
            inputs.max_len,
            cfg.kl_coefficient,
            seed,
            id,
        )
    };

    let warm_seed = seeds::derive(cfg.seed, 0x5741524d);
    let snapshot = actor.clone_frozen();
    for w in 0..cfg.critic_warmup_buffers {
        let s = seeds::derive(warm_seed, w as u64);
        let mut batch = collect(&snapshot, seeds::derive(s, 0), w)?;
        batch.compute_advantages(&critic, gamma, lambda);
        let loss = critic_update(&mut critic, &batch, cfg, seeds::derive(s, 1))?;
        warmup.push(WarmupRecord { buffer: w, critic_loss: loss });
    }

    for iter in 0..iterations {
        let s = seeds::derive(cfg.seed, iter as u64);
        let snapshot = actor.clone_frozen();
        let mut batch = collect(&snapshot, seeds::derive(s, 0), iter)?;
        batch.compute_advantages(&critic, gamma, lambda);
        let critic_loss = critic_update(&mut critic, &batch, cfg, seeds::derive(s, 1))?;
        if cfg.advantage_normalization {
            batch.normalize_advantages();
        }
        let upd = actor_update(&mut actor, &batch, cfg, seeds::derive(s, 2))?;
        metrics.push(IterationMetrics {
            iter,
            mean_reward: batch.stats.mean_reward,
            mean_len: batch.stats.mean_len,
            kl_to_ref: batch.stats.mean_kl_to_ref,
            clip_frac: upd.clip_frac,
            actor_loss: upd.loss,
            critic_loss,
        });
    }
    Ok(PpoOutcome {
        actor: actor.clone_frozen(),
        critic,
        metrics,
        warmup,
    })
}
