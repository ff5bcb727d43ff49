//! Deterministic seed derivation for replications and pipeline stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags mixed into derived seeds so that data, initialization and
/// training of one replication draw from independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Data = 1,
    Init = 2,
    Train = 3,
    Sampling = 4,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` one word at a time. Each step is a bijection
/// of the running state for a fixed part, so distinct grids map to distinct
/// seeds with overwhelming probability.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive_seed(seed, &[stage as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn grid_seeds_are_distinct() {
        let mut seen = HashSet::new();
        for n in 0..200u64 {
            for rep in 0..50u64 {
                assert!(seen.insert(derive_seed(42, &[n * 1000 + 17, rep])));
            }
        }
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(stage_seed(9, Stage::Data), stage_seed(9, Stage::Init));
    }
}
