//! Counter-keyed random streams.
//!
//! A stream is fully determined by `(seed, a, b)`, e.g. `(seed, iteration,
//! example)` during training or `(seed, sample, 0)` in the sampler, so batch
//! items can be drawn in any order or in parallel with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Real;

pub type Rng = ChaCha8Rng;

pub fn keyed(seed: u64, a: u64, b: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

pub fn fill_normal<T: Real>(rng: &mut Rng, out: &mut [T]) {
    for v in out {
        let x: f64 = StandardNormal.sample(rng);
        *v = T::of(x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_keyed() {
        let draw = |a, b| keyed(7, a, b).random::<u64>();
        assert_eq!(draw(1, 2), draw(1, 2));
        assert_ne!(draw(1, 2), draw(2, 1));
        assert_ne!(draw(0, 1), draw(0, 2));
        assert_ne!(keyed(7, 0, 0).random::<u64>(), keyed(8, 0, 0).random::<u64>());
    }
}
