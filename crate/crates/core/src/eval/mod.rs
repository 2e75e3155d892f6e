//! Policy quality against exact oracles, and the comparative experiments.

mod experiments;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds;
use crate::sequence::{enumerate_log_probs, sample, sequence_log_prob, NextToken, Token};
use crate::world::{DemonstrationSet, TokenWorld};

pub use experiments::{
    length_degeneration_study, oracle_reward_baseline, overlap_experiment, ExpertReward,
    LengthStudy, OverlapOutcome,
};

/// KL estimate in nats; `std_error` is set for Monte-Carlo estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: Option<f64>,
    pub exact: bool,
}

pub const DEFAULT_MC_SAMPLES: usize = 10_000;

/// Mean over prompts of `KL(p_expert(·|x) ‖ p_θ(·|x))` by enumeration.
pub fn exact_kl<F: Scalar, M: NextToken<F>>(
    policy: &M,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Input("no prompts to evaluate".into()));
    }
    let e: &dyn NextToken<F> = world.expert();
    let p: &dyn NextToken<F> = policy;
    let per_prompt: Result<Vec<f64>> = prompts
        .par_iter()
        .map(|x| {
            let all = enumerate_log_probs(&[e, p], x, world.max_response_length(), world.enumeration_cap())?;
            Ok(all
                .iter()
                .filter(|r| r.log_probs[0] > F::neg_infinity())
                .map(|r| {
                    let le = r.log_probs[0].as_f64();
                    le.exp() * (le - r.log_probs[1].as_f64())
                })
                .sum::<f64>())
        })
        .collect();
    let per_prompt = per_prompt?;
    // Clamp the rounding residue of an exact zero.
    Ok((per_prompt.iter().sum::<f64>() / prompts.len() as f64).max(0.0))
}

/// Monte-Carlo KL from expert samples, prompts visited round-robin.
pub fn monte_carlo_kl<F: Scalar, M: NextToken<F>>(
    policy: &M,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
    samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if prompts.is_empty() || samples < 2 {
        return Err(Error::Input("Monte-Carlo KL needs prompts and at least 2 samples".into()));
    }
    let m = world.max_response_length();
    let terms: Result<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let x = &prompts[i % prompts.len()];
            let mut rng = seeds::item_rng(seed, i as u64);
            let y = sample::<F, _>(world.expert(), x, m, 1.0, &mut rng);
            let le: F = y.log_probs.iter().copied().sum();
            let lp = sequence_log_prob(policy, x, &y.tokens)?;
            Ok((le - lp).as_f64())
        })
        .collect();
    let terms = terms?;
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(KlEstimate {
        value: mean,
        std_error: Some((var / n).sqrt()),
        exact: false,
    })
}

/// Exact KL when the world is enumerable, otherwise a Monte-Carlo estimate
/// with its standard error.
pub fn exact_kl_to_expert<F: Scalar, M: NextToken<F>>(
    policy: &M,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
) -> Result<KlEstimate> {
    match exact_kl(policy, world, prompts) {
        Ok(value) => Ok(KlEstimate {
            value,
            std_error: None,
            exact: true,
        }),
        Err(Error::OracleUnavailable { .. }) => monte_carlo_kl(
            policy,
            world,
            prompts,
            DEFAULT_MC_SAMPLES,
            seeds::derive(0, seeds::tag::EVAL),
        ),
        Err(e) => Err(e),
    }
}

/// `(response, probability)` for every response of the enumerable space.
pub fn response_distribution<F: Scalar, M: NextToken<F>>(
    model: &M,
    world: &TokenWorld<F>,
    prompt: &[Token],
) -> Result<Vec<(Vec<Token>, f64)>> {
    let m: &dyn NextToken<F> = model;
    Ok(enumerate_log_probs(&[m], prompt, world.max_response_length(), world.enumeration_cap())?
        .into_iter()
        .map(|r| (r.response, r.log_probs[0].as_f64().exp()))
        .collect())
}

/// Half the L1 distance between two aligned distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean over prompts of the total variation between two models' response
/// distributions.
pub fn mean_tv_between<F: Scalar, A: NextToken<F>, B: NextToken<F>>(
    a: &A,
    b: &B,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
) -> Result<f64> {
    let a: &dyn NextToken<F> = a;
    let b: &dyn NextToken<F> = b;
    let mut total = 0.0;
    for x in prompts {
        let all = enumerate_log_probs(&[a, b], x, world.max_response_length(), world.enumeration_cap())?;
        total += 0.5
            * all
                .iter()
                .map(|r| (r.log_probs[0].as_f64().exp() - r.log_probs[1].as_f64().exp()).abs())
                .sum::<f64>();
    }
    Ok(total / prompts.len() as f64)
}

/// Smallest set of most-probable expert responses with mass ≥ `top_p`.
pub fn expert_top_p_set<F: Scalar>(
    world: &TokenWorld<F>,
    prompt: &[Token],
    top_p: f64,
) -> Result<HashSet<Vec<Token>>> {
    let mut all = world.enumerate_responses(prompt)?;
    all.sort_by(|a, b| b.1.as_f64().total_cmp(&a.1.as_f64()));
    let mut acc = 0.0;
    let mut set = HashSet::new();
    for (y, p) in all {
        if acc >= top_p {
            break;
        }
        acc += p.as_f64();
        set.insert(y);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Policy samples drawn for length and success statistics.
    pub samples: usize,
    /// Fresh expert demonstrations on unseen prompts for held-out NLL.
    pub heldout_demos: usize,
    /// Prompts reserved for held-out KL when demonstrations are few.
    pub heldout_prompts: usize,
    /// Mass of the expert set that counts as task success.
    pub top_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            heldout_demos: 200,
            heldout_prompts: 8,
            top_p: 0.9,
        }
    }
}

/// Metrics restricted to one prompt set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBreakdown {
    pub prompts: usize,
    pub kl_to_expert: f64,
    pub kl_std_error: Option<f64>,
    pub mean_response_length: f64,
    /// `None` when the world is too large to enumerate the expert's top-p set.
    pub task_success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub kl_to_expert: f64,
    pub kl_std_error: Option<f64>,
    pub heldout_nll: f64,
    pub mean_response_length: f64,
    /// `length_histogram[l]` counts sampled responses of length `l`.
    pub length_histogram: Vec<u64>,
    pub samples: usize,
    pub task_success_rate: Option<f64>,
    pub seen: PromptBreakdown,
    pub unseen: PromptBreakdown,
}

struct SampleStats {
    mean_len: f64,
    histogram: Vec<u64>,
    success: Option<f64>,
}

fn sample_stats<F: Scalar, M: NextToken<F>>(
    policy: &M,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
    samples: usize,
    top_p: f64,
    seed: u64,
) -> Result<SampleStats> {
    let m = world.max_response_length();
    let top_sets: Option<Vec<HashSet<Vec<Token>>>> = prompts
        .iter()
        .map(|x| expert_top_p_set(world, x, top_p))
        .collect::<Result<Vec<_>>>()
        .ok();
    let drawn: Vec<(usize, Vec<Token>)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let k = i % prompts.len();
            let mut rng = seeds::item_rng(seed, i as u64);
            (k, sample::<F, _>(policy, &prompts[k], m, 1.0, &mut rng).tokens)
        })
        .collect();
    let mut histogram = vec![0u64; m + 1];
    let mut hits = 0usize;
    for (k, y) in &drawn {
        histogram[y.len()] += 1;
        if let Some(sets) = &top_sets {
            hits += sets[*k].contains(y) as usize;
        }
    }
    let total_len: usize = drawn.iter().map(|(_, y)| y.len()).sum();
    Ok(SampleStats {
        mean_len: total_len as f64 / samples.max(1) as f64,
        histogram,
        success: top_sets.map(|_| hits as f64 / samples.max(1) as f64),
    })
}

fn breakdown<F: Scalar, M: NextToken<F>>(
    policy: &M,
    world: &TokenWorld<F>,
    prompts: &[Vec<Token>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PromptBreakdown> {
    let kl = exact_kl_to_expert(policy, world, prompts)?;
    let stats = sample_stats(policy, world, prompts, cfg.samples, cfg.top_p, seed)?;
    Ok(PromptBreakdown {
        prompts: prompts.len(),
        kl_to_expert: kl.value,
        kl_std_error: kl.std_error,
        mean_response_length: stats.mean_len,
        task_success_rate: stats.success,
    })
}

/// Full report for one policy. `seen` and `unseen` are the SFT prompts and
/// the prompts never shown during SFT.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Scalar, M: NextToken<F>>(
    method: &str,
    policy: &M,
    world: &TokenWorld<F>,
    seen: &[Vec<Token>],
    unseen: &[Vec<Token>],
    heldout: &DemonstrationSet,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.samples == 0 {
        return Err(Error::Config("eval.samples must be >= 1".into()));
    }
    let mut all: Vec<Vec<Token>> = seen.to_vec();
    let known: HashSet<&Vec<Token>> = seen.iter().collect();
    all.extend(unseen.iter().filter(|x| !known.contains(x)).cloned());
    let overall = exact_kl_to_expert(policy, world, &all)?;
    let stats = sample_stats(policy, world, &all, cfg.samples, cfg.top_p, seeds::derive(seed, 0))?;
    let part_seed = seeds::derive(seed, 1);
    let heldout_nll = if heldout.is_empty() {
        f64::NAN
    } else {
        let mut total = 0.0;
        for d in &heldout.pairs {
            total -= sequence_log_prob(policy, &d.x, &d.y)?.as_f64();
        }
        total / heldout.len() as f64
    };
    Ok(EvalReport {
        method: method.to_string(),
        kl_to_expert: overall.value,
        kl_std_error: overall.std_error,
        heldout_nll,
        mean_response_length: stats.mean_len,
        length_histogram: stats.histogram,
        samples: cfg.samples,
        task_success_rate: stats.success,
        seen: breakdown(policy, world, seen, cfg, part_seed)?,
        unseen: breakdown(policy, world, unseen, cfg, part_seed)?,
    })
}

/// Comma-separated table with one row per method.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x:.6}")).unwrap_or_default()
    }
    let mut out = String::from(
        "method,kl_to_expert,kl_seen,kl_unseen,heldout_nll,mean_len,success_rate,success_seen,success_unseen\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.4},{},{},{}\n",
            r.method,
            r.kl_to_expert,
            r.seen.kl_to_expert,
            r.unseen.kl_to_expert,
            r.heldout_nll,
            r.mean_response_length,
            opt(r.task_success_rate),
            opt(r.seen.task_success_rate),
            opt(r.unseen.task_success_rate),
        ));
    }
    out
}
