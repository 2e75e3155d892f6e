//! Rollout collection from a frozen actor snapshot.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{FrozenPolicy, ValueHead};
use crate::reward::RewardModel;
use crate::scalar::Scalar;
use crate::seeds;
use crate::sequence::{sample, step_log_probs, NextToken, Token};
use crate::world::PromptSet;

use super::gae::{compute_gae, normalize};

/// One prompt/response episode and everything PPO derives from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<F> {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// `log π_old(y_t | s_t)`, recorded while sampling.
    pub old_log_probs: Vec<F>,
    /// `log p_ref(y_t | s_t)` under the KL anchor.
    pub ref_log_probs: Vec<F>,
    /// Snapshot log-probs behind a coherent reward; empty for other rewards.
    pub sft_log_probs: Vec<F>,
    pub pretrained_log_probs: Vec<F>,
    /// Task reward before the KL penalty.
    pub task_rewards: Vec<F>,
    /// Reward stream fed to GAE: task reward minus the per-step KL penalty.
    pub rewards: Vec<F>,
    pub values: Vec<F>,
    pub advantages: Vec<F>,
    pub returns: Vec<F>,
    /// `true` when the episode ended on `[EOS]`, `false` when truncated.
    pub ended_with_eos: bool,
}

impl<F: Scalar> Trajectory<F> {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// `Σ_t (log π_old − log p_ref)`, a single-sample estimate of
    /// `KL(π_old ‖ p_ref)` for this prompt.
    pub fn kl_to_ref(&self) -> F {
        self.old_log_probs
            .iter()
            .zip(&self.ref_log_probs)
            .map(|(&a, &b)| a - b)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    /// Mean per-episode task reward.
    pub mean_reward: f64,
    pub mean_len: f64,
    pub mean_kl_to_ref: f64,
}

/// A buffer of trajectories from one actor snapshot.
#[derive(Clone, Debug)]
pub struct RolloutBatch<F> {
    pub trajectories: Vec<Trajectory<F>>,
    pub snapshot: FrozenPolicy<F>,
    pub snapshot_id: usize,
    pub stats: BatchStats,
}

impl<F: Scalar> RolloutBatch<F> {
    pub fn recompute_stats(&self) -> BatchStats {
        let n = self.trajectories.len().max(1) as f64;
        let mut s = BatchStats::default();
        for t in &self.trajectories {
            s.mean_reward += t.task_rewards.iter().map(|r| r.as_f64()).sum::<f64>();
            s.mean_len += t.len() as f64;
            s.mean_kl_to_ref += t.kl_to_ref().as_f64();
        }
        s.mean_reward /= n;
        s.mean_len /= n;
        s.mean_kl_to_ref /= n;
        s
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Fills `values` from `head`, then advantages and returns.
    pub fn compute_advantages(&mut self, head: &ValueHead<F>, gamma: F, lambda: F) {
        self.trajectories.par_iter_mut().for_each(|t| {
            t.values = (0..t.len()).map(|j| head.value(&t.prompt, &t.response[..j])).collect();
            let (a, r) = compute_gae(&t.rewards, &t.values, gamma, lambda);
            t.advantages = a;
            t.returns = r;
        });
    }

    /// Whitens advantages across every step of the buffer.
    pub fn normalize_advantages(&mut self) -> bool {
        let mut flat: Vec<F> = self
            .trajectories
            .iter()
            .flat_map(|t| t.advantages.iter().copied())
            .collect();
        let applied = normalize(&mut flat);
        if applied {
            let mut it = flat.into_iter();
            for t in &mut self.trajectories {
                for a in &mut t.advantages {
                    *a = it.next().expect("aligned advantages");
                }
            }
        }
        applied
    }
}

/// Samples `count` episodes from `actor`, prompts drawn uniformly from
/// `prompts`, each with its own stream `item_rng(seed, i)`. Rewards come from
/// `reward`; the per-step penalty `kl_coefficient · (log π_old − log p_ref)`
/// is subtracted from them.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<F: Scalar>(
    actor: &FrozenPolicy<F>,
    reward: &dyn RewardModel<F>,
    reference: &FrozenPolicy<F>,
    prompts: &PromptSet,
    count: usize,
    max_len: usize,
    kl_coefficient: f64,
    seed: u64,
    snapshot_id: usize,
) -> Result<RolloutBatch<F>> {
    if prompts.is_empty() {
        return Err(Error::Config("PPO prompt set is empty".into()));
    }
    let eos = actor.vocab().eos();
    let beta = F::of(kl_coefficient);
    let trajectories: Result<Vec<Trajectory<F>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::item_rng(seed, i as u64);
            let x = prompts.prompts[rng.random_range(0..prompts.len())].clone();
            let s = sample::<F, _>(actor, &x, max_len, 1.0, &mut rng);
            let trace = reward.score(&x, &s.tokens, max_len)?;
            let ref_log_probs = step_log_probs(reference, &x, &s.tokens)?;
            let rewards = trace
                .rewards
                .iter()
                .zip(s.log_probs.iter().zip(&ref_log_probs))
                .map(|(&r, (&o, &p))| r - beta * (o - p))
                .collect();
            Ok(Trajectory {
                ended_with_eos: s.tokens.last() == Some(&eos),
                prompt: x,
                response: s.tokens,
                old_log_probs: s.log_probs,
                ref_log_probs,
                sft_log_probs: trace.sft_log_probs,
                pretrained_log_probs: trace.pretrained_log_probs,
                task_rewards: trace.rewards,
                rewards,
                values: vec![],
                advantages: vec![],
                returns: vec![],
            })
        })
        .collect();
    let mut batch = RolloutBatch {
        trajectories: trajectories?,
        snapshot: actor.clone(),
        snapshot_id,
        stats: BatchStats::default(),
    };
    batch.stats = batch.recompute_stats();
    Ok(batch)
}
