use crate::scalar::{log_softmax_in_place, Scalar};
use crate::sequence::{ContextEncoder, Token, Vocabulary};

pub(super) fn log_probs<F: Scalar>(
    enc: ContextEncoder,
    vocab: Vocabulary,
    params: &[F],
    prompt: &[Token],
    prefix: &[Token],
    out: &mut [F],
) {
    let w = vocab.len();
    let c = enc.index(prompt, prefix);
    out.copy_from_slice(&params[c * w..(c + 1) * w]);
    log_softmax_in_place(out);
}

/// `∂ log softmax(z)[a] / ∂ z = onehot(a) − softmax(z)`, scattered into the
/// visited context's row.
#[allow(clippy::too_many_arguments)]
pub(super) fn accumulate_step<F: Scalar>(
    enc: ContextEncoder,
    vocab: Vocabulary,
    params: &[F],
    prompt: &[Token],
    prefix: &[Token],
    token: Token,
    weight: F,
    grad: &mut [F],
) {
    let w = vocab.len();
    let c = enc.index(prompt, prefix);
    let mut row = params[c * w..(c + 1) * w].to_vec();
    log_softmax_in_place(&mut row);
    let g = &mut grad[c * w..(c + 1) * w];
    for (i, (gi, &l)) in g.iter_mut().zip(&row).enumerate() {
        let onehot = if i == token { F::one() } else { F::zero() };
        *gi += weight * (onehot - l.exp());
    }
}
