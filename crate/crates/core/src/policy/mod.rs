//! Parameterised autoregressive policies.
//!
//! Two architectures share one flat parameter vector and one API:
//!
//! * tabular n-gram: one logit row per context of the last `order` tokens;
//! * tiny MLP: one-hot context window, a `tanh` hidden layer and a linear
//!   readout, differentiated by hand.
//!
//! Gradients are accumulated into caller-owned buffers so that batch
//! objectives (likelihood, clipped surrogate) can weight each step.

mod checkpoint;
mod mlp;
mod tabular;
mod value;

use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::Rng;
use crate::sequence::{self, ContextEncoder, NextToken, Sampled, Token, Vocabulary};

pub use checkpoint::{read_policy, read_value_head, write_policy, write_value_head, CheckpointHeader};
pub use value::ValueHead;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Tabular { order: usize },
    Mlp { window: usize, hidden: usize },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Tabular { order: 1 }
    }
}

impl Architecture {
    pub fn num_params(&self, vocab: Vocabulary) -> usize {
        match *self {
            Architecture::Tabular { order } => {
                ContextEncoder::new(vocab, order).num_contexts() * vocab.len()
            }
            Architecture::Mlp { window, hidden } => mlp::Layout::new(vocab, window, hidden).len(),
        }
    }

    pub fn validate(&self, vocab: Vocabulary) -> Result<()> {
        match *self {
            Architecture::Tabular { order } => {
                let n = (vocab.slot_values() as f64).powi(order as i32) * vocab.len() as f64;
                if n > 5e7 {
                    return Err(Error::Config(format!(
                        "tabular order {order} needs {n} parameters"
                    )));
                }
            }
            Architecture::Mlp { window, hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("mlp hidden width must be >= 1".into()));
                }
                if window == 0 {
                    return Err(Error::Config("mlp context window must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pretrained,
    Sft,
    Actor,
    Reference,
}

/// One step in the history of a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage: String,
    pub seed: u64,
}

/// Objective value together with its parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord<F> {
    pub value: F,
    pub gradient: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<F> {
    arch: Architecture,
    vocab: Vocabulary,
    params: Vec<F>,
    role: Role,
    lineage: Vec<Lineage>,
}

impl<F: Scalar> Policy<F> {
    /// Fresh policy. Tabular logits start at zero (uniform); MLP hidden
    /// weights are drawn from `N(0, 0.5²)` with a zero readout, which is also
    /// uniform at initialisation.
    pub fn new(arch: Architecture, vocab: Vocabulary, role: Role, seed: u64) -> Result<Self> {
        arch.validate(vocab)?;
        let params = match arch {
            Architecture::Tabular { .. } => vec![F::zero(); arch.num_params(vocab)],
            Architecture::Mlp { window, hidden } => {
                mlp::Layout::new(vocab, window, hidden).init(seed)
            }
        };
        Ok(Self {
            arch,
            vocab,
            params,
            role,
            lineage: vec![Lineage {
                stage: "init".into(),
                seed,
            }],
        })
    }

    /// Wraps an explicit parameter vector.
    pub fn from_params(arch: Architecture, vocab: Vocabulary, role: Role, params: Vec<F>) -> Result<Self> {
        arch.validate(vocab)?;
        if params.len() != arch.num_params(vocab) {
            return Err(Error::Input(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                arch.num_params(vocab)
            )));
        }
        Ok(Self {
            arch,
            vocab,
            params,
            role,
            lineage: Vec::new(),
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn lineage(&self) -> &[Lineage] {
        &self.lineage
    }

    pub fn push_lineage(&mut self, stage: impl Into<String>, seed: u64) {
        self.lineage.push(Lineage {
            stage: stage.into(),
            seed,
        });
    }

    pub(crate) fn set_lineage(&mut self, lineage: Vec<Lineage>) {
        self.lineage = lineage;
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// `θ ← θ + step · direction`.
    pub fn apply(&mut self, direction: &[F], step: F) {
        assert_eq!(direction.len(), self.params.len());
        for (p, &d) in self.params.iter_mut().zip(direction) {
            *p += step * d;
        }
    }

    pub fn log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<F> {
        sequence::sequence_log_prob(self, prompt, response)
    }

    pub fn step_log_probs(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<F>> {
        sequence::step_log_probs(self, prompt, response)
    }

    pub fn sample(&self, prompt: &[Token], max_len: usize, temperature: f64, rng: &mut Rng) -> Sampled<F> {
        sequence::sample(self, prompt, max_len, temperature, rng)
    }

    /// Adds `weight · ∇ log p(token | prompt, prefix)` into `grad`.
    pub fn accumulate_step_grad(
        &self,
        prompt: &[Token],
        prefix: &[Token],
        token: Token,
        weight: F,
        grad: &mut [F],
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        match self.arch {
            Architecture::Tabular { order } => tabular::accumulate_step(
                ContextEncoder::new(self.vocab, order),
                self.vocab,
                &self.params,
                prompt,
                prefix,
                token,
                weight,
                grad,
            ),
            Architecture::Mlp { window, hidden } => mlp::Layout::new(self.vocab, window, hidden)
                .accumulate_step(&self.params, prompt, prefix, token, weight, grad),
        }
    }

    /// Adds `Σ_j weights[j] · ∇ log p(y_j | x, y_<j)` into `grad`.
    pub fn accumulate_grad(&self, prompt: &[Token], response: &[Token], weights: &[F], grad: &mut [F]) {
        assert_eq!(weights.len(), response.len());
        for (j, (&token, &w)) in response.iter().zip(weights).enumerate() {
            if w != F::zero() {
                self.accumulate_step_grad(prompt, &response[..j], token, w, grad);
            }
        }
    }

    /// Analytic gradient of `log p(y | x)`.
    pub fn grad_log_prob(&self, prompt: &[Token], response: &[Token]) -> Result<GradientRecord<F>> {
        let value = self.log_prob(prompt, response)?;
        let mut gradient = vec![F::zero(); self.params.len()];
        let ones = vec![F::one(); response.len()];
        self.accumulate_grad(prompt, response, &ones, &mut gradient);
        Ok(GradientRecord { value, gradient })
    }

    /// Immutable deep copy; later updates to `self` do not affect it.
    pub fn clone_frozen(&self) -> FrozenPolicy<F> {
        FrozenPolicy(Arc::new(self.clone()))
    }
}

impl<F: Scalar> NextToken<F> for Policy<F> {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn next_log_probs(&self, prompt: &[Token], prefix: &[Token], out: &mut [F]) {
        match self.arch {
            Architecture::Tabular { order } => tabular::log_probs(
                ContextEncoder::new(self.vocab, order),
                self.vocab,
                &self.params,
                prompt,
                prefix,
                out,
            ),
            Architecture::Mlp { window, hidden } => {
                mlp::Layout::new(self.vocab, window, hidden).log_probs(&self.params, prompt, prefix, out)
            }
        }
    }
}

/// Shared, immutable policy snapshot (`π_old`, `p_SFT`, `p_PT`).
#[derive(Clone, Debug)]
pub struct FrozenPolicy<F>(Arc<Policy<F>>);

impl<F: Scalar> FrozenPolicy<F> {
    /// A live, independently owned copy with the given role.
    pub fn thaw(&self, role: Role) -> Policy<F> {
        let mut p = (*self.0).clone();
        p.role = role;
        p
    }

    /// Whether both handles point at the same snapshot.
    pub fn same_snapshot(&self, other: &FrozenPolicy<F>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl<F> Deref for FrozenPolicy<F> {
    type Target = Policy<F>;
    fn deref(&self) -> &Policy<F> {
        &self.0
    }
}

impl<F: Scalar> NextToken<F> for FrozenPolicy<F> {
    fn vocab(&self) -> Vocabulary {
        self.0.vocab
    }
    fn next_log_probs(&self, prompt: &[Token], prefix: &[Token], out: &mut [F]) {
        self.0.next_log_probs(prompt, prefix, out)
    }
}
