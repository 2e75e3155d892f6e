use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sequence::{ContextEncoder, Token, Vocabulary};

use super::mlp::Layout;
use super::{Architecture, Policy};

/// State-value function over the policy's context encoding.
///
/// States whose partial response already contains `[EOS]` are absorbing and
/// evaluate to zero regardless of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueHead<F> {
    arch: Architecture,
    vocab: Vocabulary,
    params: Vec<F>,
}

impl<F: Scalar> ValueHead<F> {
    /// Zero-initialised head.
    pub fn new(arch: Architecture, vocab: Vocabulary) -> Result<Self> {
        arch.validate(vocab)?;
        let len = Self::num_params_for(arch, vocab);
        Ok(Self {
            arch,
            vocab,
            params: vec![F::zero(); len],
        })
    }

    /// Critic initialised from a policy: the policy's trunk (hidden layer of
    /// an MLP) is copied and a zero scalar readout attached. Tabular policies
    /// have no trunk, so the value table starts at zero over the same contexts.
    pub fn from_policy_trunk(policy: &Policy<F>) -> Result<Self> {
        let mut head = Self::new(policy.architecture(), policy.vocab_ref())?;
        if let Architecture::Mlp { window, hidden } = policy.architecture() {
            let layout = Layout::new(policy.vocab_ref(), window, hidden);
            let trunk = layout.w2();
            head.params[..trunk].copy_from_slice(&policy.params()[..trunk]);
        }
        Ok(head)
    }

    pub fn from_params(arch: Architecture, vocab: Vocabulary, params: Vec<F>) -> Result<Self> {
        if params.len() != Self::num_params_for(arch, vocab) {
            return Err(Error::Input(format!(
                "value head needs {} parameters, got {}",
                Self::num_params_for(arch, vocab),
                params.len()
            )));
        }
        Ok(Self { arch, vocab, params })
    }

    fn num_params_for(arch: Architecture, vocab: Vocabulary) -> usize {
        match arch {
            Architecture::Tabular { order } => ContextEncoder::new(vocab, order).num_contexts(),
            Architecture::Mlp { window, hidden } => Layout::new(vocab, window, hidden).w2() + hidden + 1,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
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

    pub fn apply(&mut self, direction: &[F], step: F) {
        for (p, &d) in self.params.iter_mut().zip(direction) {
            *p += step * d;
        }
    }

    fn absorbing(&self, prefix: &[Token]) -> bool {
        prefix.contains(&self.vocab.eos())
    }

    /// `V(x, y_<t)`.
    pub fn value(&self, prompt: &[Token], prefix: &[Token]) -> F {
        if self.absorbing(prefix) {
            return F::zero();
        }
        match self.arch {
            Architecture::Tabular { order } => {
                self.params[ContextEncoder::new(self.vocab, order).index(prompt, prefix)]
            }
            Architecture::Mlp { window, hidden } => {
                let layout = Layout::new(self.vocab, window, hidden);
                let cols = layout.active_columns(prompt, prefix);
                let h = layout.hidden_activations(&self.params, &cols);
                let head = layout.w2();
                let mut v = self.params[head + hidden];
                for (i, &hi) in h.iter().enumerate() {
                    v += self.params[head + i] * hi;
                }
                v
            }
        }
    }

    /// Adds `weight · ∇V(x, y_<t)` into `grad`.
    pub fn accumulate_grad(&self, prompt: &[Token], prefix: &[Token], weight: F, grad: &mut [F]) {
        if self.absorbing(prefix) {
            return;
        }
        match self.arch {
            Architecture::Tabular { order } => {
                grad[ContextEncoder::new(self.vocab, order).index(prompt, prefix)] += weight;
            }
            Architecture::Mlp { window, hidden } => {
                let layout = Layout::new(self.vocab, window, hidden);
                let cols = layout.active_columns(prompt, prefix);
                let h = layout.hidden_activations(&self.params, &cols);
                let head = layout.w2();
                let dh: Vec<F> = (0..hidden)
                    .map(|i| {
                        grad[head + i] += weight * h[i];
                        weight * self.params[head + i]
                    })
                    .collect();
                grad[head + hidden] += weight;
                layout.backprop_hidden(&h, &dh, &cols, grad);
            }
        }
    }
}

impl<F: Scalar> Policy<F> {
    pub(crate) fn vocab_ref(&self) -> Vocabulary {
        self.vocab
    }
}
