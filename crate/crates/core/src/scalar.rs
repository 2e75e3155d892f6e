//! Floating-point abstraction shared by every numeric component.
//!
//! All tables, policies, rewards and losses are generic over [`Scalar`] so the
//! same code runs in `f64` (the default used by experiments and oracles) and
//! `f32`. Rational types are not supported: the algorithms live in the log
//! domain and need `exp`/`ln`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable for log-probabilities, parameters and gradients.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a configuration constant into this scalar.
    #[inline]
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Converts a count or index.
    #[inline]
    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("count representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable in-place log-softmax. Returns the log normaliser.
pub fn log_softmax_in_place<F: Scalar>(logits: &mut [F]) -> F {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut total = F::zero();
    for &l in logits.iter() {
        total += (l - max).exp();
    }
    let log_z = max + total.ln();
    for l in logits.iter_mut() {
        *l -= log_z;
    }
    log_z
}

/// `ln(Σ exp(v))` without overflow.
pub fn log_sum_exp<F: Scalar>(values: &[F]) -> F {
    let max = values
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == F::neg_infinity() {
        return max;
    }
    let total: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}
