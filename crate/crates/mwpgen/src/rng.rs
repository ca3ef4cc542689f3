//! Seeded random streams.
//!
//! Every run derives all randomness from one root seed. Each component pulls
//! a named substream so that, for example, changing how many Gumbel draws the
//! rollout consumes does not shift the data shuffle.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Derives a child seed from `(seed, name)`. FNV-1a over the name bytes,
/// mixed into the root seed; stable across platforms.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

pub fn substream(seed: u64, name: &str) -> Stream {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}

/// Uniform draw in `[0, 1)`, 53-bit resolution.
pub fn uniform(rng: &mut Stream) -> f64 {
    use rand_chacha::rand_core::RngCore;
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut Stream) -> f64 {
    let u1 = uniform(rng).max(f64::MIN_POSITIVE);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform index in `[0, n)`.
pub fn index(rng: &mut Stream, n: usize) -> usize {
    use rand_chacha::rand_core::RngCore;
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Stream, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_are_independent_and_stable() {
        let a: Vec<u64> = {
            use rand_chacha::rand_core::RngCore;
            let mut r = substream(7, "data");
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            use rand_chacha::rand_core::RngCore;
            let mut r = substream(7, "gumbel");
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
        let a2: Vec<u64> = {
            use rand_chacha::rand_core::RngCore;
            let mut r = substream(7, "data");
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, a2);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = substream(1, "u");
        for _ in 0..1000 {
            let u = uniform(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = substream(3, "shuffle");
        let mut v: Vec<usize> = (0..20).collect();
        shuffle(&mut r, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }
}
