//! Discrete sampling machinery: Gumbel-max sampling, the tempered softmax
//! relaxation of one-hot draws, straight-through Bernoulli gates, and the
//! analytic Bernoulli KL used by the keyword selector objective.

use crate::rng::{self, Stream};
use crate::tensor::{Tape, TensorRef};

/// Standard Gumbel draw: `-log(-log(u))`, `u ~ uniform(0,1)`. The uniform is
/// nudged away from zero so the result is always finite.
pub fn gumbel(rng: &mut Stream) -> f64 {
    let u = rng::uniform(rng).max(1e-300);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(n: usize, rng: &mut Stream) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng)).collect()
}

/// First index of the maximum value (ties break low).
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact sample from `softmax(logits)` via perturb-and-argmax.
pub fn gumbel_max_sample(logits: &[f64], rng: &mut Stream) -> usize {
    let perturbed: Vec<f64> = logits.iter().map(|&l| l + gumbel(rng)).collect();
    argmax(&perturbed)
}

/// `softmax((logits + noise) / tau)` with caller-provided noise, so the same
/// draw can be replayed (finite differences, hard/relaxed pairing).
pub fn relaxed_onehot(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    assert_eq!(logits.len(), noise.len(), "noise length mismatch");
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    let scaled: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &g)| (l + g) / tau)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// Tape version of [`relaxed_onehot`]: differentiable w.r.t. whatever
/// produced `logits`. Noise enters as a constant leaf.
pub fn relaxed_onehot_on_tape(
    tape: &mut Tape,
    logits: TensorRef,
    noise: &[f64],
    tau: f64,
) -> TensorRef {
    let (r, c) = tape.shape(logits);
    assert_eq!(noise.len(), r * c, "noise length mismatch");
    assert!(tau > 0.0, "temperature must be positive, got {tau}");
    let g = tape.leaf(r, c, noise.to_vec());
    let shifted = tape.add(logits, g);
    let scaled = tape.scalar_mul(shifted, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// Hard Bernoulli draws: 1 where `u < q`.
pub fn sample_bernoulli(q: &[f64], rng: &mut Stream) -> Vec<f64> {
    q.iter()
        .map(|&p| if rng::uniform(rng) < p { 1.0 } else { 0.0 })
        .collect()
}

/// KL(Bernoulli(q) || Bernoulli(rho)) with the 0·log 0 = 0 convention.
pub fn bernoulli_kl(q: f64, rho: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q out of range: {q}");
    assert!(rho > 0.0 && rho < 1.0, "rho must be in (0,1), got {rho}");
    let mut kl = 0.0;
    if q > 0.0 {
        kl += q * (q / rho).ln();
    }
    if q < 1.0 {
        kl += (1.0 - q) * ((1.0 - q) / (1.0 - rho)).ln();
    }
    kl
}

/// Elementwise tape KL against a fixed prior rate. Saturated probabilities
/// (exactly 0 or 1) make this non-finite, which the training loop reports as
/// a numerical failure rather than hiding behind a clamp.
pub fn bernoulli_kl_on_tape(tape: &mut Tape, q: TensorRef, rho: f64) -> TensorRef {
    assert!(rho > 0.0 && rho < 1.0, "rho must be in (0,1), got {rho}");
    let (r, c) = tape.shape(q);
    let ones = tape.leaf(r, c, vec![1.0; r * c]);
    let ln_rho = tape.scalar_leaf(rho.ln());
    let ln_1m_rho = tape.scalar_leaf((1.0 - rho).ln());
    let log_q = tape.log(q);
    let lhs_inner = tape.sub(log_q, ln_rho);
    let lhs = tape.mul(q, lhs_inner);
    let one_minus_q = tape.sub(ones, q);
    let log_1m_q = tape.log(one_minus_q);
    let rhs_inner = tape.sub(log_1m_q, ln_1m_rho);
    let rhs = tape.mul(one_minus_q, rhs_inner);
    tape.add(lhs, rhs)
}
