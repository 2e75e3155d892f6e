//! Vocabulary, context encoding and the operations every autoregressive
//! next-token model shares: scoring, sampling and exhaustive enumeration of
//! the response space.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds::Rng;

/// Token id. Ordinary tokens are `0..size`, `[EOS]` is `size`.
pub type Token = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

// Never empty: `len` counts `[EOS]`.
#[allow(clippy::len_without_is_empty)]
impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2 ordinary tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    /// Number of ordinary tokens.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.size
    }

    /// Ordinary tokens plus `[EOS]`: the width of every next-token distribution.
    pub fn len(&self) -> usize {
        self.size + 1
    }

    /// Padding symbol used in context windows before the start of the prompt.
    /// Never emitted as a token.
    pub fn pad(&self) -> usize {
        self.size + 1
    }

    /// Distinct values a context slot can take (tokens plus padding).
    pub fn slot_values(&self) -> usize {
        self.size + 2
    }

    pub fn check_prompt(&self, prompt: &[Token]) -> Result<()> {
        if let Some(&t) = prompt.iter().find(|&&t| t >= self.size) {
            return Err(Error::Input(format!(
                "prompt token {t} outside ordinary range 0..{}",
                self.size
            )));
        }
        Ok(())
    }

    /// Checks a (possibly partial) response: tokens in range and `[EOS]` only
    /// in final position.
    pub fn check_response(&self, response: &[Token]) -> Result<()> {
        for (j, &t) in response.iter().enumerate() {
            if t > self.size {
                return Err(Error::Input(format!(
                    "response token {t} at position {j} outside 0..={}",
                    self.size
                )));
            }
            if t == self.size && j + 1 != response.len() {
                return Err(Error::Input(format!(
                    "[EOS] at position {j} is not the final token"
                )));
            }
        }
        Ok(())
    }
}

/// Maps the last `order` tokens of `prompt ++ prefix` to a dense row index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextEncoder {
    order: usize,
    base: usize,
    pad: usize,
}

impl ContextEncoder {
    pub fn new(vocab: Vocabulary, order: usize) -> Self {
        Self {
            order,
            base: vocab.slot_values(),
            pad: vocab.pad(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_contexts(&self) -> usize {
        self.base.pow(self.order as u32)
    }

    /// Token `back` positions before the next one (0 = most recent), or pad.
    #[inline]
    pub fn slot(&self, prompt: &[Token], prefix: &[Token], back: usize) -> usize {
        if back < prefix.len() {
            prefix[prefix.len() - 1 - back]
        } else {
            let j = back - prefix.len();
            if j < prompt.len() {
                prompt[prompt.len() - 1 - j]
            } else {
                self.pad
            }
        }
    }

    #[inline]
    pub fn index(&self, prompt: &[Token], prefix: &[Token]) -> usize {
        let mut idx = 0;
        let mut mul = 1;
        for back in 0..self.order {
            idx += self.slot(prompt, prefix, back) * mul;
            mul *= self.base;
        }
        idx
    }
}

/// Anything that yields `log p(· | x, y_<j)` over the full vocabulary.
pub trait NextToken<F: Scalar>: Sync {
    fn vocab(&self) -> Vocabulary;

    /// Writes natural-log next-token probabilities into `out`
    /// (`out.len() == vocab.len()`).
    fn next_log_probs(&self, prompt: &[Token], prefix: &[Token], out: &mut [F]);
}

impl<F: Scalar, T: NextToken<F> + ?Sized> NextToken<F> for &T {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
    fn next_log_probs(&self, prompt: &[Token], prefix: &[Token], out: &mut [F]) {
        (**self).next_log_probs(prompt, prefix, out)
    }
}

/// `log p(y_j | x, y_<j)` for every position of `response`.
pub fn step_log_probs<F: Scalar, M: NextToken<F> + ?Sized>(
    model: &M,
    prompt: &[Token],
    response: &[Token],
) -> Result<Vec<F>> {
    let vocab = model.vocab();
    vocab.check_prompt(prompt)?;
    vocab.check_response(response)?;
    let mut buf = vec![F::zero(); vocab.len()];
    Ok((0..response.len())
        .map(|j| {
            model.next_log_probs(prompt, &response[..j], &mut buf);
            buf[response[j]]
        })
        .collect())
}

/// `log p(y | x) = Σ_j log p(y_j | x, y_<j)`.
pub fn sequence_log_prob<F: Scalar, M: NextToken<F> + ?Sized>(
    model: &M,
    prompt: &[Token],
    response: &[Token],
) -> Result<F> {
    if response.is_empty() {
        return Err(Error::Input("empty response".into()));
    }
    Ok(step_log_probs(model, prompt, response)?.into_iter().sum())
}

/// A sampled response with the per-token log-probabilities of the sampling
/// model (at temperature 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled<F> {
    pub tokens: Vec<Token>,
    pub log_probs: Vec<F>,
}

impl<F> Sampled<F> {
    pub fn ends_with(&self, token: Token) -> bool {
        self.tokens.last() == Some(&token)
    }
}

/// Draws one response, stopping at `[EOS]` or after `max_len` tokens.
///
/// `temperature` rescales the logits used for drawing; the recorded
/// log-probabilities are always those of the untempered model so that they
/// agree with [`step_log_probs`].
pub fn sample<F: Scalar, M: NextToken<F> + ?Sized>(
    model: &M,
    prompt: &[Token],
    max_len: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Sampled<F> {
    assert!(temperature > 0.0, "temperature must be positive");
    let vocab = model.vocab();
    let eos = vocab.eos();
    let mut tokens = Vec::with_capacity(max_len);
    let mut log_probs = Vec::with_capacity(max_len);
    let mut buf = vec![F::zero(); vocab.len()];
    let mut weights = vec![0.0f64; vocab.len()];
    while tokens.len() < max_len {
        model.next_log_probs(prompt, &tokens, &mut buf);
        let token = if temperature == 1.0 {
            draw(buf.iter().map(|l| l.as_f64().exp()), &mut weights, rng)
        } else {
            let scaled: Vec<f64> = buf.iter().map(|l| l.as_f64() / temperature).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            draw(scaled.iter().map(|s| (s - max).exp()), &mut weights, rng)
        };
        tokens.push(token);
        log_probs.push(buf[token]);
        if token == eos {
            break;
        }
    }
    Sampled { tokens, log_probs }
}

/// Inverse-CDF draw from unnormalised non-negative weights.
fn draw(weights: impl Iterator<Item = f64>, scratch: &mut [f64], rng: &mut Rng) -> usize {
    let mut total = 0.0;
    for (slot, w) in scratch.iter_mut().zip(weights) {
        total += w;
        *slot = total;
    }
    let u: f64 = rng.random::<f64>() * total;
    scratch
        .iter()
        .position(|&c| u < c)
        .unwrap_or_else(|| {
            // u == total can only happen through rounding; take the last
            // token with positive mass.
            let mut last = 0;
            let mut prev = 0.0;
            for (i, &c) in scratch.iter().enumerate() {
                if c > prev {
                    last = i;
                }
                prev = c;
            }
            last
        })
}

/// Size of the complete response space for `size` ordinary tokens and
/// horizon `max_len`: every `[EOS]`-terminated sequence of length ≤ max_len
/// plus every length-`max_len` sequence of ordinary tokens.
pub fn response_space_size(vocab: Vocabulary, max_len: usize) -> u128 {
    let s = vocab.size() as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(s);
    }
    total.saturating_add(pow)
}

/// One response of the enumerated space with its log-probability under each
/// of the supplied models (same order as the `models` argument).
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedResponse<F> {
    pub response: Vec<Token>,
    pub log_probs: Vec<F>,
}

/// Exhaustively enumerates every complete response to `prompt`, scoring each
/// under all `models` in a single depth-first pass.
pub fn enumerate_log_probs<F: Scalar>(
    models: &[&dyn NextToken<F>],
    prompt: &[Token],
    max_len: usize,
    cap: u64,
) -> Result<Vec<EnumeratedResponse<F>>> {
    assert!(!models.is_empty());
    let vocab = models[0].vocab();
    if models.iter().any(|m| m.vocab() != vocab) {
        return Err(Error::Input("models disagree on vocabulary".into()));
    }
    vocab.check_prompt(prompt)?;
    let count = response_space_size(vocab, max_len);
    if count > cap as u128 {
        return Err(Error::OracleUnavailable { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut prefix = Vec::with_capacity(max_len);
    let acc = vec![F::zero(); models.len()];
    enumerate_rec(models, vocab, prompt, max_len, &mut prefix, &acc, &mut out);
    Ok(out)
}

fn enumerate_rec<F: Scalar>(
    models: &[&dyn NextToken<F>],
    vocab: Vocabulary,
    prompt: &[Token],
    max_len: usize,
    prefix: &mut Vec<Token>,
    acc: &[F],
    out: &mut Vec<EnumeratedResponse<F>>,
) {
    let mut tables = vec![vec![F::zero(); vocab.len()]; models.len()];
    for (m, table) in models.iter().zip(tables.iter_mut()) {
        m.next_log_probs(prompt, prefix, table);
    }
    for token in 0..vocab.len() {
        let next: Vec<F> = acc
            .iter()
            .zip(&tables)
            .map(|(&a, t)| a + t[token])
            .collect();
        prefix.push(token);
        if token == vocab.eos() || prefix.len() == max_len {
            out.push(EnumeratedResponse {
                response: prefix.clone(),
                log_probs: next,
            });
        } else {
            enumerate_rec(models, vocab, prompt, max_len, prefix, &next, out);
        }
        prefix.pop();
    }
}
