//! Maximum-likelihood training: pretraining on the broad distribution and
//! supervised fine-tuning on expert demonstrations.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::exact_kl_to_expert;
use crate::policy::{FrozenPolicy, Policy, Role};
use crate::scalar::Scalar;
use crate::seeds;
use crate::sequence::{sample, Token};
use crate::world::{Demonstration, DemonstrationSet, OverlapTag, TokenWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Extra log record every this many steps; 0 logs only at epoch ends.
    pub eval_every: usize,
    /// Gradient-norm clip applied to each mini-batch gradient.
    pub grad_clip: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 16,
            epochs: 2,
            shuffle_seed: 0,
            eval_every: 0,
            grad_clip: None,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_kl: Option<f64>,
}

/// Prompts on which held-out KL to the expert is tracked.
#[derive(Clone, Copy)]
pub struct HeldOut<'a, F> {
    pub world: &'a TokenWorld<F>,
    pub prompts: &'a [Vec<Token>],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub policy: FrozenPolicy<F>,
    pub log: Vec<TrainRecord>,
}

/// Mean negative log-likelihood of `demos` under `policy`.
pub fn mean_nll<F: Scalar>(policy: &Policy<F>, demos: &[Demonstration]) -> Result<f64> {
    let parts: Result<Vec<f64>> = demos
        .par_iter()
        .map(|d| Ok(-policy.log_prob(&d.x, &d.y)?.as_f64()))
        .collect();
    Ok(parts?.iter().sum::<f64>() / demos.len().max(1) as f64)
}

/// Gradient of the batch-mean log-likelihood. Per-item gradients are summed
/// in batch order so the result does not depend on the thread pool.
fn batch_gradient<F: Scalar>(policy: &Policy<F>, batch: &[&Demonstration]) -> (f64, Vec<F>) {
    let n = policy.num_params();
    let parts: Vec<(F, Vec<F>)> = batch
        .par_iter()
        .map(|d| {
            let mut g = vec![F::zero(); n];
            let ones = vec![F::one(); d.y.len()];
            policy.accumulate_grad(&d.x, &d.y, &ones, &mut g);
            let lp = policy.log_prob(&d.x, &d.y).unwrap_or(F::neg_infinity());
            (lp, g)
        })
        .collect();
    let mut grad = vec![F::zero(); n];
    let mut ll = 0.0;
    for (lp, g) in parts {
        ll += lp.as_f64();
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
    }
    let scale = F::one() / F::of_usize(batch.len());
    grad.iter_mut().for_each(|g| *g *= scale);
    (-ll / batch.len() as f64, grad)
}

fn clip_norm<F: Scalar>(grad: &mut [F], bound: f64) {
    let norm = grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > bound {
        let s = F::of(bound / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

fn heldout_kl<F: Scalar>(policy: &Policy<F>, heldout: Option<HeldOut<'_, F>>) -> Result<Option<f64>> {
    match heldout {
        Some(h) if !h.prompts.is_empty() => Ok(Some(exact_kl_to_expert(policy, h.world, h.prompts)?.value)),
        _ => Ok(None),
    }
}

/// Mini-batch SGD ascent on the mean log-likelihood, in place.
///
/// Logs an epoch-0 record before any update, then one record per
/// `eval_every` steps and one at every epoch end.
fn fit<F: Scalar>(
    policy: &mut Policy<F>,
    demos: &[Demonstration],
    cfg: &SftConfig,
    epochs: usize,
    epoch_offset: usize,
    stage: &'static str,
    heldout: Option<HeldOut<'_, F>>,
) -> Result<Vec<TrainRecord>> {
    let mut log = vec![TrainRecord {
        step: 0,
        epoch: epoch_offset,
        train_nll: mean_nll(policy, demos)?,
        heldout_kl: heldout_kl(policy, heldout)?,
    }];
    let lr = F::of(cfg.learning_rate);
    let mut step = 0;
    let mut order: Vec<usize> = (0..demos.len()).collect();
    for e in 0..epochs {
        let epoch = epoch_offset + e + 1;
        order.sort_unstable();
        order.shuffle(&mut seeds::item_rng(cfg.shuffle_seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Demonstration> = chunk.iter().map(|&i| &demos[i]).collect();
            let (nll, mut grad) = batch_gradient(policy, &batch);
            step += 1;
            if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::training(stage, step, format!("non-finite loss {nll}")));
            }
            if let Some(c) = cfg.grad_clip {
                clip_norm(&mut grad, c);
            }
            policy.apply(&grad, lr);
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                log.push(TrainRecord {
                    step,
                    epoch,
                    train_nll: mean_nll(policy, demos)?,
                    heldout_kl: heldout_kl(policy, heldout)?,
                });
            }
        }
        if log.last().map(|r| r.step) != Some(step) {
            log.push(TrainRecord {
                step,
                epoch,
                train_nll: mean_nll(policy, demos)?,
                heldout_kl: heldout_kl(policy, heldout)?,
            });
        }
        let last = log.last().expect("non-empty log").train_nll;
        if !last.is_finite() {
            return Err(Error::training(stage, step, format!("non-finite loss {last}")));
        }
    }
    Ok(log)
}

/// Samples `count` pairs with `x ~ ρ` and `y` from the pretraining table.
pub fn pretraining_corpus<F: Scalar>(world: &TokenWorld<F>, count: usize, seed: u64) -> DemonstrationSet {
    let m = world.max_response_length();
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::item_rng(seed, i as u64);
            let x = world.sample_prompt(&mut rng).to_vec();
            let y = sample::<F, _>(world.pretrain_distribution(), &x, m, 1.0, &mut rng).tokens;
            Demonstration { x, y }
        })
        .collect();
    DemonstrationSet {
        pairs,
        provenance: "pretrain".into(),
    }
}

/// Fits a fresh policy to `samples` draws from the pretraining distribution.
pub fn pretrain<F: Scalar>(
    mut policy: Policy<F>,
    world: &TokenWorld<F>,
    cfg: &SftConfig,
    samples: usize,
    seed: u64,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if samples == 0 {
        return Err(Error::Config("pretraining needs at least one sample".into()));
    }
    let corpus = pretraining_corpus(world, samples, seed);
    let log = fit(&mut policy, &corpus.pairs, cfg, cfg.epochs, 0, "pretrain", None)?;
    policy.set_role(Role::Pretrained);
    policy.push_lineage("pretrain", seed);
    Ok(TrainOutcome {
        policy: policy.clone_frozen(),
        log,
    })
}

/// Supervised fine-tuning of the pretrained snapshot on `demos`.
pub fn sft<F: Scalar>(
    pretrained: &FrozenPolicy<F>,
    demos: &DemonstrationSet,
    cfg: &SftConfig,
    heldout: Option<HeldOut<'_, F>>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::Config("SFT needs at least one demonstration".into()));
    }
    let mut policy = pretrained.thaw(Role::Sft);
    let log = fit(&mut policy, &demos.pairs, cfg, cfg.epochs, 0, "sft", heldout)?;
    policy.push_lineage("sft", cfg.shuffle_seed);
    Ok(TrainOutcome {
        policy: policy.clone_frozen(),
        log,
    })
}

/// Continues SFT for `extra_epochs` more passes; epochs in the log continue
/// from `cfg.epochs`.
pub fn sft_extended<F: Scalar>(
    sft_policy: &FrozenPolicy<F>,
    demos: &DemonstrationSet,
    extra_epochs: usize,
    cfg: &SftConfig,
    heldout: Option<HeldOut<'_, F>>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if demos.is_empty() {
        return Err(Error::Config("SFT needs at least one demonstration".into()));
    }
    let mut policy = sft_policy.thaw(Role::Sft);
    let log = fit(&mut policy, &demos.pairs, cfg, extra_epochs, cfg.epochs, "sft_extended", heldout)?;
    if extra_epochs > 0 {
        policy.push_lineage("sft_extended", cfg.shuffle_seed);
    }
    Ok(TrainOutcome {
        policy: policy.clone_frozen(),
        log,
    })
}

/// Training demonstrations plus the prompts reserved for held-out scoring.
#[derive(Clone, Debug)]
pub struct HeldOutSplit {
    pub train: DemonstrationSet,
    pub heldout_prompts: Vec<Vec<Token>>,
    pub heldout_demos: DemonstrationSet,
}

/// Above `threshold` pairs, a `fraction` of the distinct demo prompts (and
/// their pairs) is withheld. Otherwise all demos train and up to
/// `fresh_prompts` prompts the demos never touch are drawn from the world,
/// with `fresh_demos` expert pairs on them. When every prompt is already
/// covered, the demo prompts themselves are scored.
pub fn split_heldout<F: Scalar>(
    world: &TokenWorld<F>,
    demos: &DemonstrationSet,
    threshold: usize,
    fraction: f64,
    fresh_prompts: usize,
    fresh_demos: usize,
    seed: u64,
) -> Result<HeldOutSplit> {
    let distinct = demos.prompts();
    if demos.len() > threshold && distinct.len() >= 2 {
        let mut shuffled = distinct.clone();
        shuffled.shuffle(&mut seeds::rng(seed));
        let k = ((distinct.len() as f64 * fraction).round() as usize).clamp(1, distinct.len() - 1);
        let held: HashSet<Vec<Token>> = shuffled[..k].iter().cloned().collect();
        let (hp, tp): (Vec<_>, Vec<_>) = demos.pairs.iter().cloned().partition(|d| held.contains(&d.x));
        let mut heldout_prompts: Vec<Vec<Token>> = held.into_iter().collect();
        heldout_prompts.sort();
        return Ok(HeldOutSplit {
            train: DemonstrationSet {
                pairs: tp,
                provenance: demos.provenance.clone(),
            },
            heldout_prompts,
            heldout_demos: DemonstrationSet {
                pairs: hp,
                provenance: "heldout".into(),
            },
        });
    }
    let fresh = world.sample_prompt_set(fresh_prompts, &distinct, OverlapTag::Minimum, seed);
    let heldout_prompts = if fresh.is_empty() { distinct } else { fresh.prompts.clone() };
    let heldout_set = crate::world::PromptSet::new(heldout_prompts.clone(), OverlapTag::Minimum);
    let heldout_demos = if fresh_demos > 0 {
        world.sample_demonstrations(&heldout_set, fresh_demos, seeds::derive(seed, 1))?
    } else {
        DemonstrationSet {
            pairs: vec![],
            provenance: "heldout".into(),
        }
    };
    Ok(HeldOutSplit {
        train: demos.clone(),
        heldout_prompts,
        heldout_demos: DemonstrationSet {
            provenance: "heldout".into(),
            ..heldout_demos
        },
    })
}
