//! Comparative experiments: prompt-overlap setups, reward granularity and
//! length, and PPO against an external (expert) reward.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiment::{ExperimentConfig, Overlap, Pipeline, Stage};
use crate::policy::FrozenPolicy;
use crate::ppo::{run_ppo, IterationMetrics, PpoConfig, PpoInputs};
use crate::reward::{check_complete, place_at_terminal, RewardModel, RewardTrace};
use crate::scalar::Scalar;
use crate::sequence::{sequence_log_prob, NextToken, Token};
use crate::world::{DemonstrationSet, MarkovTable, PromptSet, TokenWorld};

use super::{evaluate, EvalConfig, EvalReport};

/// `log p_expert(y|x)` on the terminal step: an independent reward that
/// knows the task, standing in for a separately trained reward model.
pub struct ExpertReward<'a, F> {
    pub expert: &'a MarkovTable<F>,
}

impl<F: Scalar> RewardModel<F> for ExpertReward<'_, F> {
    fn score(&self, prompt: &[Token], response: &[Token], max_len: usize) -> Result<RewardTrace<F>> {
        check_complete(self.expert.vocab().eos(), response, max_len)?;
        let total = sequence_log_prob(self.expert, prompt, response)?;
        // Responses the expert never emits get a large finite penalty
        // instead of -inf.
        let total = if total.is_finite() { total } else { F::of(-50.0) };
        Ok(RewardTrace {
            rewards: place_at_terminal(total, response.len()),
            ..RewardTrace::default()
        })
    }
}

/// PPO from the SFT snapshot with the expert reward, evaluated like every
/// other method.
#[allow(clippy::too_many_arguments)]
pub fn oracle_reward_baseline<F: Scalar>(
    sft_policy: &FrozenPolicy<F>,
    world: &TokenWorld<F>,
    prompts: &PromptSet,
    ppo: &PpoConfig,
    seen: &[Vec<Token>],
    unseen: &[Vec<Token>],
    heldout: &DemonstrationSet,
    eval: &EvalConfig,
    eval_seed: u64,
) -> Result<(EvalReport, Vec<IterationMetrics>)> {
    let reward = ExpertReward { expert: world.expert() };
    let out = run_ppo(
        PpoInputs {
            sft: sft_policy,
            reference: sft_policy,
            reward: &reward,
            prompts,
            max_len: world.max_response_length(),
        },
        ppo,
    )?;
    let report = evaluate("oracle_ppo", &out.actor, world, seen, unseen, heldout, eval, eval_seed)?;
    Ok((report, out.metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapOutcome {
    pub setup: Overlap,
    pub reports: Vec<EvalReport>,
    /// SRPPO's unseen-prompt KL is strictly below SFT's.
    pub srppo_improves_unseen: bool,
    /// Whether seen and unseen prompt sets coincide (no extra prompts).
    pub degenerate_split: bool,
}

/// Runs SFT, SFT-extended and SRPPO under one overlap setup and compares
/// them on seen and unseen prompts.
pub fn overlap_experiment(setup: Overlap, cfg: &ExperimentConfig) -> Result<OverlapOutcome> {
    let mut cfg = cfg.clone();
    cfg.data.overlap = setup;
    cfg.stages = vec![Stage::Pretrain, Stage::Sft, Stage::SftExtended, Stage::Ppo, Stage::Eval];
    let mut p = Pipeline::<f64>::new(&cfg)?;
    p.run_all()?;
    let reports = p.reports.clone();
    let kl = |m: &str| reports.iter().find(|r| r.method == m).map(|r| r.unseen.kl_to_expert);
    let srppo_improves_unseen = matches!((kl("srppo"), kl("sft")), (Some(a), Some(b)) if a < b);
    Ok(OverlapOutcome {
        setup,
        srppo_improves_unseen,
        degenerate_split: p.data().seen == p.data().unseen,
        reports,
    })
}

/// Mean-length curves of two PPO runs that differ only in reward granularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStudy {
    pub token_wise: Vec<IterationMetrics>,
    pub sequence_at_eos: Vec<IterationMetrics>,
}

impl LengthStudy {
    fn growth(m: &[IterationMetrics]) -> f64 {
        match (m.first(), m.last()) {
            (Some(a), Some(b)) if a.mean_len > 0.0 => b.mean_len / a.mean_len,
            _ => 1.0,
        }
    }

    /// Last-iteration over first-iteration mean length, token-wise run.
    pub fn token_wise_growth(&self) -> f64 {
        Self::growth(&self.token_wise)
    }

    pub fn sequence_growth(&self) -> f64 {
        Self::growth(&self.sequence_at_eos)
    }
}

/// Pretrains, fine-tunes and then runs PPO twice from the same SFT snapshot,
/// once per granularity, with identical seeds.
pub fn length_degeneration_study(cfg: &ExperimentConfig) -> Result<LengthStudy> {
    let mut cfg = cfg.clone();
    cfg.stages = vec![Stage::Pretrain, Stage::Sft, Stage::LengthStudy];
    let mut p = Pipeline::<f64>::new(&cfg)?;
    p.run_all()?;
    Ok(p.length_study.clone().expect("length study stage ran"))
}
