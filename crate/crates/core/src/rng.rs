//! Seed derivation.
//!
//! Every random quantity in a run descends from one base seed through
//! [`derive_seed`], so independent pieces of work (trials, permutation
//! replicates, data splits) get their own streams without sharing state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a counter. Distinct `(base, index)`
/// pairs give statistically unrelated seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix(mix(base ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03)))
}

/// Named sub-streams used inside a single test invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Training = 1,
    Split = 2,
    Generation = 3,
    Permutation = 4,
    Classifier = 5,
    Covariates = 6,
    Noise = 7,
    Trim = 8,
}

pub fn stream_seed(base: u64, stream: Stream) -> u64 {
    derive_seed(base, 0xA000 + stream as u64)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(base: u64, stream: Stream) -> Rng {
    rng_from_seed(stream_seed(base, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for base in 0..20u64 {
            for i in 0..500u64 {
                assert!(seen.insert(derive_seed(base, i)));
            }
        }
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(3, 7));
    }
}
