//! Deterministic random streams.
//!
//! Every stochastic decision in the crate draws from a stream keyed by a run
//! seed plus a tuple of integer tags (step, example, token, ...). Resuming a
//! run therefore needs only the step counter, and parallel consumers never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a seed with a list of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Domain-separation tags so unrelated consumers of the same seed never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const SAMPLER_SELECT: u64 = 3;
    pub const SAMPLER_TOKEN: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const CAMERA: u64 = 6;
    pub const PERCEPTUAL: u64 = 7;
    pub const EVAL: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_separated() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
