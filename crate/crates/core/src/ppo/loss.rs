//! Critic regression and the clipped actor surrogate, with analytic gradients.
//!
//! Both losses are means over the steps of a set of trajectories. Gradients
//! are reduced over fixed-size chunks in index order, so results do not
//! depend on how rayon schedules the chunks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{Policy, ValueHead};
use crate::scalar::Scalar;
use crate::sequence::step_log_probs;

use super::rollout::Trajectory;

const CHUNK: usize = 16;

/// Per-chunk loss, gradient, clipped count and ratio sum.
type ChunkStats<F> = (F, Vec<F>, usize, f64);

fn reduce<F: Scalar>(parts: Vec<(F, Vec<F>)>, n: usize) -> (F, Vec<F>) {
    let mut total = F::zero();
    let mut grad = vec![F::zero(); n];
    for (v, g) in parts {
        total += v;
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
    }
    (total, grad)
}

fn step_count<F>(trajs: &[&Trajectory<F>]) -> usize {
    trajs.iter().map(|t| t.response.len()).sum()
}

/// `mean_t (V(s_t) − R_t)²` and its gradient in the head parameters.
pub fn critic_loss_and_grad<F: Scalar>(head: &ValueHead<F>, trajs: &[&Trajectory<F>]) -> (F, Vec<F>) {
    let steps = step_count(trajs);
    let n = head.num_params();
    if steps == 0 {
        return (F::zero(), vec![F::zero(); n]);
    }
    let inv = F::one() / F::of_usize(steps);
    let two = F::of(2.0);
    let parts: Vec<(F, Vec<F>)> = trajs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![F::zero(); n];
            let mut loss = F::zero();
            for t in chunk {
                for j in 0..t.len() {
                    let prefix = &t.response[..j];
                    let err = head.value(&t.prompt, prefix) - t.returns[j];
                    loss += err * err * inv;
                    head.accumulate_grad(&t.prompt, prefix, two * err * inv, &mut g);
                }
            }
            (loss, g)
        })
        .collect();
    reduce(parts, n)
}

/// Diagnostics of the clipped surrogate on a set of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorStats<F> {
    /// `mean_t −min(ρ_t Â_t, clip(ρ_t, 1−ε, 1+ε) Â_t)`.
    pub loss: F,
    /// Fraction of steps on which the clipped branch is strictly smaller.
    pub clip_frac: f64,
    pub mean_ratio: f64,
    /// Gradient of `loss`.
    pub gradient: Vec<F>,
}

/// Clipped surrogate term for one step and whether its gradient flows
/// (`false` when the clipped branch is the active minimum).
pub fn surrogate_term<F: Scalar>(ratio: F, advantage: F, epsilon: F) -> (F, bool) {
    let clipped = ratio.max(F::one() - epsilon).min(F::one() + epsilon);
    let a = ratio * advantage;
    let b = clipped * advantage;
    if b < a {
        (-b, false)
    } else {
        (-a, true)
    }
}

/// Clipped actor loss and its gradient. Ratios are `exp(log π_θ − log π_old)`.
pub fn actor_loss_and_grad<F: Scalar>(
    actor: &Policy<F>,
    trajs: &[&Trajectory<F>],
    epsilon: f64,
) -> Result<ActorStats<F>> {
    let steps = step_count(trajs);
    let n = actor.num_params();
    if steps == 0 {
        return Ok(ActorStats {
            loss: F::zero(),
            clip_frac: 0.0,
            mean_ratio: 1.0,
            gradient: vec![F::zero(); n],
        });
    }
    let inv = F::one() / F::of_usize(steps);
    let eps = F::of(epsilon);
    let parts: Result<Vec<ChunkStats<F>>> = trajs
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = vec![F::zero(); n];
            let mut loss = F::zero();
            let mut clipped = 0usize;
            let mut ratio_sum = 0.0;
            for (k, t) in chunk.iter().enumerate() {
                let lp = step_log_probs(actor, &t.prompt, &t.response)?;
                let mut weights = vec![F::zero(); t.len()];
                for j in 0..t.len() {
                    let ratio = (lp[j] - t.old_log_probs[j]).exp();
                    if !ratio.is_finite() {
                        return Err(Error::training(
                            "actor_update",
                            c * CHUNK + k,
                            format!("non-finite probability ratio at response step {j}"),
                        ));
                    }
                    ratio_sum += ratio.as_f64();
                    let (term, flows) = surrogate_term(ratio, t.advantages[j], eps);
                    loss += term * inv;
                    if flows {
                        // d(−ρÂ)/dθ = −Â ρ ∇log π
                        weights[j] = -t.advantages[j] * ratio * inv;
                    } else {
                        clipped += 1;
                    }
                }
                actor.accumulate_grad(&t.prompt, &t.response, &weights, &mut g);
            }
            Ok((loss, g, clipped, ratio_sum))
        })
        .collect();
    let parts = parts?;
    let clipped: usize = parts.iter().map(|p| p.2).sum();
    let ratio_sum: f64 = parts.iter().map(|p| p.3).sum();
    let (loss, gradient) = reduce(parts.into_iter().map(|(l, g, _, _)| (l, g)).collect(), n);
    Ok(ActorStats {
        loss,
        clip_frac: clipped as f64 / steps as f64,
        mean_ratio: ratio_sum / steps as f64,
        gradient,
    })
}
