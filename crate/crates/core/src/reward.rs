//! Coherent reward: the log-ratio between the SFT and pretrained snapshots,
//! placed either at the terminal step or spread token by token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::FrozenPolicy;
use crate::scalar::{log_sum_exp, Scalar};
use crate::sequence::{enumerate_log_probs, step_log_probs, NextToken, Token};
use crate::world::TokenWorld;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Whole-sequence log-ratio on the terminal step (`[EOS]` or step `m`).
    #[default]
    SequenceAtEos,
    /// Per-token log-ratio on every step.
    TokenWise,
}

/// Which snapshot anchors the KL regulariser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    #[default]
    Sft,
    Pretrained,
}

/// Per-step rewards for one response, plus the snapshot log-probs they were
/// computed from when the reward is coherent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardTrace<F> {
    pub rewards: Vec<F>,
    pub sft_log_probs: Vec<F>,
    pub pretrained_log_probs: Vec<F>,
}

/// Source of per-step rewards for PPO.
pub trait RewardModel<F: Scalar>: Sync {
    fn score(&self, prompt: &[Token], response: &[Token], max_len: usize) -> Result<RewardTrace<F>>;
}

/// Checks that `response` is complete: `[EOS]`-terminated or exactly `max_len` long.
pub fn check_complete(eos: Token, response: &[Token], max_len: usize) -> Result<()> {
    if response.is_empty() {
        return Err(Error::Input("empty response".into()));
    }
    if response.len() > max_len {
        return Err(Error::Invariant(format!(
            "trajectory of length {} exceeds horizon {max_len}",
            response.len()
        )));
    }
    if response.last() != Some(&eos) && response.len() != max_len {
        return Err(Error::Invariant(format!(
            "trajectory of length {} ends without [EOS] before the horizon {max_len}",
            response.len()
        )));
    }
    Ok(())
}

/// Terminal-only placement: zeros, then `total` on the last step.
pub fn place_at_terminal<F: Scalar>(total: F, len: usize) -> Vec<F> {
    let mut r = vec![F::zero(); len];
    r[len - 1] = total;
    r
}

#[derive(Clone, Debug)]
pub struct RewardSpec<F> {
    pub sft: FrozenPolicy<F>,
    pub pretrained: FrozenPolicy<F>,
    pub granularity: Granularity,
    /// Symmetric clip applied to each emitted step reward.
    pub reward_clip: Option<F>,
}

impl<F: Scalar> RewardSpec<F> {
    pub fn new(sft: FrozenPolicy<F>, pretrained: FrozenPolicy<F>, granularity: Granularity) -> Result<Self> {
        if sft.vocab() != pretrained.vocab() {
            return Err(Error::Config("SFT and pretrained snapshots use different vocabularies".into()));
        }
        Ok(Self {
            sft,
            pretrained,
            granularity,
            reward_clip: None,
        })
    }

    pub fn with_clip(mut self, bound: Option<F>) -> Self {
        self.reward_clip = bound;
        self
    }

    fn finite(&self, v: F, what: &str) -> Result<F> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteReward(format!("{what} evaluated to {v}")))
        }
    }

    /// `log p_SFT(y|x) − log p_PT(y|x)`.
    pub fn sequence_reward(&self, prompt: &[Token], response: &[Token]) -> Result<F> {
        if response.is_empty() {
            return Err(Error::Input("empty response".into()));
        }
        // Summed per token, in the same order as `assign_from_log_probs`,
        // so the terminal reward equals this value bit for bit.
        let s = step_log_probs(&self.sft, prompt, response)?;
        let p = step_log_probs(&self.pretrained, prompt, response)?;
        let total: F = s.iter().zip(&p).map(|(&a, &b)| a - b).sum();
        self.finite(total, "sequence log-ratio")
    }

    /// `log p_SFT(y_j|x,y_<j) − log p_PT(y_j|x,y_<j)`.
    pub fn token_reward(&self, prompt: &[Token], prefix: &[Token], token: Token) -> Result<F> {
        let v = self.sft.vocab();
        v.check_prompt(prompt)?;
        let mut full = prefix.to_vec();
        full.push(token);
        v.check_response(&full)?;
        let mut a = vec![F::zero(); v.len()];
        let mut b = vec![F::zero(); v.len()];
        self.sft.next_log_probs(prompt, prefix, &mut a);
        self.pretrained.next_log_probs(prompt, prefix, &mut b);
        self.finite(a[token] - b[token], "token log-ratio")
    }

    /// Places rewards from stored per-token snapshot log-probs.
    pub fn assign_from_log_probs(&self, sft_lp: &[F], pt_lp: &[F]) -> Result<Vec<F>> {
        assert_eq!(sft_lp.len(), pt_lp.len());
        let per_token: Vec<F> = sft_lp.iter().zip(pt_lp).map(|(&s, &p)| s - p).collect();
        let mut rewards = match self.granularity {
            Granularity::SequenceAtEos => {
                let total: F = per_token.iter().copied().sum();
                place_at_terminal(self.finite(total, "sequence log-ratio")?, per_token.len())
            }
            Granularity::TokenWise => {
                for &r in &per_token {
                    self.finite(r, "token log-ratio")?;
                }
                per_token
            }
        };
        if let Some(b) = self.reward_clip {
            rewards.iter_mut().for_each(|r| *r = r.max(-b).min(b));
        }
        Ok(rewards)
    }

    /// Per-step reward vector for a complete response.
    pub fn assign_rewards(&self, prompt: &[Token], response: &[Token], max_len: usize) -> Result<Vec<F>> {
        Ok(self.score(prompt, response, max_len)?.rewards)
    }
}

impl<F: Scalar> RewardModel<F> for RewardSpec<F> {
    fn score(&self, prompt: &[Token], response: &[Token], max_len: usize) -> Result<RewardTrace<F>> {
        check_complete(self.sft.vocab().eos(), response, max_len)?;
        let sft_log_probs = step_log_probs(&self.sft, prompt, response)?;
        let pretrained_log_probs = step_log_probs(&self.pretrained, prompt, response)?;
        Ok(RewardTrace {
            rewards: self.assign_from_log_probs(&sft_log_probs, &pretrained_log_probs)?,
            sft_log_probs,
            pretrained_log_probs,
        })
    }
}

/// Reward that is identically zero (no signal).
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroReward;

impl<F: Scalar> RewardModel<F> for ZeroReward {
    fn score(&self, _prompt: &[Token], response: &[Token], _max_len: usize) -> Result<RewardTrace<F>> {
        Ok(RewardTrace {
            rewards: vec![F::zero(); response.len()],
            ..RewardTrace::default()
        })
    }
}

/// Normalised distribution over the enumerated response space.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseDistribution<F> {
    pub responses: Vec<Vec<Token>>,
    pub probs: Vec<F>,
}

/// Maximiser of `E[r̃] − λ·KL(π ‖ p_ref)` for a single prompt,
/// `p*(y|x) ∝ p_ref(y|x)·exp(r̃(x,y)/λ)`.
///
/// With the SFT snapshot as reference this is
/// `p_SFT^(1+1/λ) · p_PT^(−1/λ)`, normalised over the enumerable space.
pub fn closed_form_optimum<F: Scalar>(
    spec: &RewardSpec<F>,
    world: &TokenWorld<F>,
    prompt: &[Token],
    kl_coefficient: f64,
    reference: KlReference,
) -> Result<ResponseDistribution<F>> {
    if !(kl_coefficient > 0.0) {
        return Err(Error::Config("kl_coefficient must be positive".into()));
    }
    let s: &dyn NextToken<F> = &spec.sft;
    let p: &dyn NextToken<F> = &spec.pretrained;
    let all = enumerate_log_probs(&[s, p], prompt, world.max_response_length(), world.enumeration_cap())?;
    let inv = F::of(1.0 / kl_coefficient);
    let log_w: Vec<F> = all
        .iter()
        .map(|r| {
            let (ls, lp) = (r.log_probs[0], r.log_probs[1]);
            let lref = match reference {
                KlReference::Sft => ls,
                KlReference::Pretrained => lp,
            };
            lref + inv * (ls - lp)
        })
        .collect();
    let log_z = log_sum_exp(&log_w);
    Ok(ResponseDistribution {
        probs: log_w.iter().map(|&l| (l - log_z).exp()).collect(),
        responses: all.into_iter().map(|r| r.response).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, Policy, Role};
    use crate::sequence::Vocabulary;
    use crate::world::{MarkovTable, WorldSpec};

    fn table_policy(v: Vocabulary, order: usize, probs: &[f64]) -> FrozenPolicy<f64> {
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Policy::from_params(Architecture::Tabular { order }, v, Role::Sft, logits)
            .unwrap()
            .clone_frozen()
    }

    fn one_step_world(v: Vocabulary) -> TokenWorld<f64> {
        let spec = WorldSpec {
            vocab_size: v.size(),
            prompt_length: 1,
            max_response_length: 1,
            markov_order: 0,
            ..WorldSpec::default()
        };
        let u = vec![1.0 / v.len() as f64; v.len()];
        TokenWorld::from_tables(
            spec,
            MarkovTable::from_probs(v, 0, u.clone()).unwrap(),
            MarkovTable::from_probs(v, 0, u).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn single_token_log_ratio() {
        let v = Vocabulary::new(2).unwrap();
        let sft = table_policy(v, 0, &[0.8, 0.1, 0.1]);
        let pt = table_policy(v, 0, &[0.5, 0.25, 0.25]);
        let spec = RewardSpec::new(sft, pt, Granularity::SequenceAtEos).unwrap();
        let r = spec.sequence_reward(&[0], &[0]).unwrap();
        assert!((r - (0.8f64 / 0.5).ln()).abs() < 1e-12);
        assert!((r - 0.4700).abs() < 1e-4);
    }

    #[test]
    fn token_reward_ln3() {
        let v = Vocabulary::new(2).unwrap();
        let sft = table_policy(v, 0, &[0.9, 0.05, 0.05]);
        let pt = table_policy(v, 0, &[0.3, 0.35, 0.35]);
        let spec = RewardSpec::new(sft, pt, Granularity::TokenWise).unwrap();
        let r = spec.token_reward(&[1], &[], 0).unwrap();
        assert!((r - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn placement_follows_terminal_rule() {
        let v = Vocabulary::new(2).unwrap();
        let sft = table_policy(v, 0, &[0.5, 0.3, 0.2]);
        let pt = table_policy(v, 0, &[0.2, 0.3, 0.5]);
        let spec = RewardSpec::new(sft.clone(), pt.clone(), Granularity::SequenceAtEos).unwrap();
        let eos = v.eos();
        let y = [0, 1, eos];
        let r = spec.assign_rewards(&[0], &y, 3).unwrap();
        let total = spec.sequence_reward(&[0], &y).unwrap();
        assert_eq!(&r[..2], &[0.0, 0.0]);
        assert!((r[2] - total).abs() < 1e-15);
        // truncated at m = 3 without EOS
        let r = spec.assign_rewards(&[0], &[0, 0, 1], 3).unwrap();
        assert_eq!(&r[..2], &[0.0, 0.0]);
        assert!((r[2] - spec.sequence_reward(&[0], &[0, 0, 1]).unwrap()).abs() < 1e-15);
        // incomplete or over-long trajectories
        assert!(matches!(spec.assign_rewards(&[0], &[0, 1], 3), Err(Error::Invariant(_))));
        assert!(matches!(spec.assign_rewards(&[0], &[0, 1, 1, 0], 3), Err(Error::Invariant(_))));
    }

    #[test]
    fn clipping_bounds_rewards() {
        let v = Vocabulary::new(2).unwrap();
        let sft = table_policy(v, 0, &[0.98, 0.01, 0.01]);
        let pt = table_policy(v, 0, &[0.01, 0.01, 0.98]);
        let spec = RewardSpec::new(sft, pt, Granularity::SequenceAtEos).unwrap().with_clip(Some(1.0));
        let r = spec.assign_rewards(&[0], &[0, 0], 2).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn optimum_for_one_token_world() {
        // p_SFT = (0.8, 0.2), p_PT = (0.5, 0.5) over two responses; the third
        // token gets negligible mass in both.
        let v = Vocabulary::new(2).unwrap();
        let eps = 1e-300;
        let sft = table_policy(v, 0, &[0.8, 0.2 - eps, eps]);
        let pt = table_policy(v, 0, &[0.5, 0.5 - eps, eps]);
        let spec = RewardSpec::new(sft, pt, Granularity::SequenceAtEos).unwrap();
        let world = one_step_world(v);
        let opt = closed_form_optimum(&spec, &world, &[0], 0.5, KlReference::Sft).unwrap();
        // unnormalised (0.8·1.6², 0.2·0.4²) = (2.048, 0.032)
        let z = 2.048 + 0.032;
        assert!((opt.probs[0] - 2.048 / z).abs() < 1e-9);
        assert!((opt.probs[1] - 0.032 / z).abs() < 1e-9);
        assert!((opt.probs[0] - 0.9846).abs() < 1e-4);
    }

    #[test]
    fn optimum_limits() {
        let v = Vocabulary::new(2).unwrap();
        let sft = table_policy(v, 0, &[0.6, 0.3, 0.1]);
        let pt = table_policy(v, 0, &[0.2, 0.3, 0.5]);
        let world = one_step_world(v);
        let spec = RewardSpec::new(sft.clone(), pt, Granularity::SequenceAtEos).unwrap();
        let far = closed_form_optimum(&spec, &world, &[0], 1e9, KlReference::Sft).unwrap();
        for (p, q) in far.probs.iter().zip([0.6, 0.3, 0.1]) {
            assert!((p - q).abs() < 1e-6);
        }
        let same = RewardSpec::new(sft.clone(), sft, Granularity::SequenceAtEos).unwrap();
        let opt = closed_form_optimum(&same, &world, &[0], 0.5, KlReference::Sft).unwrap();
        for (p, q) in opt.probs.iter().zip([0.6, 0.3, 0.1]) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!(closed_form_optimum(&same, &world, &[0], 0.0, KlReference::Sft).is_err());
    }
}
