//! One-hidden-layer network over a one-hot context window.
//!
//! Parameter layout (row-major): `W1[hidden × window·slots]`, `b1[hidden]`,
//! `W2[vocab × hidden]`, `b2[vocab]`.

use rand_distr::{Distribution, Normal};

use crate::scalar::{log_softmax_in_place, Scalar};
use crate::seeds;
use crate::sequence::{ContextEncoder, Token, Vocabulary};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub enc: ContextEncoder,
    pub slots: usize,
    pub window: usize,
    pub hidden: usize,
    pub out: usize,
}

impl Layout {
    pub fn new(vocab: Vocabulary, window: usize, hidden: usize) -> Self {
        Self {
            enc: ContextEncoder::new(vocab, window),
            slots: vocab.slot_values(),
            window,
            hidden,
            out: vocab.len(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.window * self.slots
    }

    pub fn w1(&self) -> usize {
        0
    }
    pub fn b1(&self) -> usize {
        self.hidden * self.inputs()
    }
    pub fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    pub fn b2(&self) -> usize {
        self.w2() + self.out * self.hidden
    }
    pub fn len(&self) -> usize {
        self.b2() + self.out
    }

    pub fn init<F: Scalar>(&self, seed: u64) -> Vec<F> {
        let mut rng = seeds::rng(seeds::derive(seed, seeds::tag::POLICY_INIT));
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let mut params = vec![F::zero(); self.len()];
        for p in &mut params[..self.b1()] {
            *p = F::of(normal.sample(&mut rng));
        }
        params
    }

    /// Columns of `W1` activated by the context window.
    pub fn active_columns(&self, prompt: &[Token], prefix: &[Token]) -> Vec<usize> {
        (0..self.window)
            .map(|back| back * self.slots + self.enc.slot(prompt, prefix, back))
            .collect()
    }

    /// Hidden activations `tanh(b1 + Σ W1[:, col])`.
    pub fn hidden_activations<F: Scalar>(&self, params: &[F], cols: &[usize]) -> Vec<F> {
        let n_in = self.inputs();
        (0..self.hidden)
            .map(|i| {
                let mut pre = params[self.b1() + i];
                for &c in cols {
                    pre += params[self.w1() + i * n_in + c];
                }
                pre.tanh()
            })
            .collect()
    }

    pub fn log_probs<F: Scalar>(&self, params: &[F], prompt: &[Token], prefix: &[Token], out: &mut [F]) {
        let cols = self.active_columns(prompt, prefix);
        let h = self.hidden_activations(params, &cols);
        for (v, o) in out.iter_mut().enumerate() {
            let row = &params[self.w2() + v * self.hidden..self.w2() + (v + 1) * self.hidden];
            let mut z = params[self.b2() + v];
            for (&w, &hi) in row.iter().zip(&h) {
                z += w * hi;
            }
            *o = z;
        }
        log_softmax_in_place(out);
    }

    pub fn accumulate_step<F: Scalar>(
        &self,
        params: &[F],
        prompt: &[Token],
        prefix: &[Token],
        token: Token,
        weight: F,
        grad: &mut [F],
    ) {
        let cols = self.active_columns(prompt, prefix);
        let h = self.hidden_activations(params, &cols);
        let mut lp = vec![F::zero(); self.out];
        // readout reusing h
        for (v, o) in lp.iter_mut().enumerate() {
            let row = &params[self.w2() + v * self.hidden..self.w2() + (v + 1) * self.hidden];
            let mut z = params[self.b2() + v];
            for (&w, &hi) in row.iter().zip(&h) {
                z += w * hi;
            }
            *o = z;
        }
        log_softmax_in_place(&mut lp);
        let dz: Vec<F> = lp
            .iter()
            .enumerate()
            .map(|(v, &l)| weight * (if v == token { F::one() } else { F::zero() } - l.exp()))
            .collect();
        let mut dh = vec![F::zero(); self.hidden];
        for (v, &d) in dz.iter().enumerate() {
            grad[self.b2() + v] += d;
            let base = self.w2() + v * self.hidden;
            for i in 0..self.hidden {
                grad[base + i] += d * h[i];
                dh[i] += d * params[base + i];
            }
        }
        self.backprop_hidden(&h, &dh, &cols, grad);
    }

    /// Propagates `∂/∂h` through `tanh` into `b1` and the active `W1` columns.
    pub fn backprop_hidden<F: Scalar>(&self, h: &[F], dh: &[F], cols: &[usize], grad: &mut [F]) {
        let n_in = self.inputs();
        for i in 0..self.hidden {
            let dpre = dh[i] * (F::one() - h[i] * h[i]);
            grad[self.b1() + i] += dpre;
            for &c in cols {
                grad[self.w1() + i * n_in + c] += dpre;
            }
        }
    }
}
