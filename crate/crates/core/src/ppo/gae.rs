//! Generalised advantage estimation and discounted returns.

use crate::scalar::Scalar;

/// Advantages `Â_t = Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γV(s_{t+1}) − V(s_t)`
/// and returns `R_t = Σ_k γ^k r_{t+k}`, both truncated at the episode end
/// where the bootstrap value is 0.
pub fn compute_gae<F: Scalar>(rewards: &[F], values: &[F], gamma: F, lambda: F) -> (Vec<F>, Vec<F>) {
    assert_eq!(rewards.len(), values.len());
    let t_max = rewards.len();
    let mut adv = vec![F::zero(); t_max];
    let mut ret = vec![F::zero(); t_max];
    let mut running_adv = F::zero();
    let mut running_ret = F::zero();
    for t in (0..t_max).rev() {
        let next_v = if t + 1 < t_max { values[t + 1] } else { F::zero() };
        let delta = rewards[t] + gamma * next_v - values[t];
        running_adv = delta + gamma * lambda * running_adv;
        running_ret = rewards[t] + gamma * running_ret;
        adv[t] = running_adv;
        ret[t] = running_ret;
    }
    (adv, ret)
}

/// Whitens `values` in place to mean 0, std 1. Left untouched when the
/// standard deviation is below `1e-8`; returns whether it was applied.
pub fn normalize<F: Scalar>(values: &mut [F]) -> bool {
    if values.len() < 2 {
        return false;
    }
    let n = F::of_usize(values.len());
    let mean = values.iter().copied().sum::<F>() / n;
    let var = values.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() / n;
    let std = var.sqrt();
    if !(std >= F::of(1e-8)) {
        return false;
    }
    values.iter_mut().for_each(|a| *a = (*a - mean) / std);
    true
}
