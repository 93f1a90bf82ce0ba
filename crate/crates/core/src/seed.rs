//! Replayable seed derivation.
//!
//! Every random stream in a run (rewiring, DropKey, initialization, shuffling)
//! is derived from the global seed plus a role tag and the position it is used
//! at, so a run can be replayed from its seed alone and results do not depend on
//! the order in which batches are prepared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GrassRng = ChaCha8Rng;

/// Streams a derived seed can belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Rewire = 3,
    DropKey = 4,
    EvalRewire = 5,
    Data = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base`, the stream tag and any number of coordinates into one seed.
pub fn derive_seed(base: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn derive_rng(base: u64, stream: Stream, coords: &[u64]) -> GrassRng {
    GrassRng::seed_from_u64(derive_seed(base, stream, coords))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_separates_coords() {
        let a = derive_seed(7, Stream::Rewire, &[1, 2, 3]);
        assert_eq!(a, derive_seed(7, Stream::Rewire, &[1, 2, 3]));
        assert_ne!(a, derive_seed(7, Stream::Rewire, &[1, 3, 2]));
        assert_ne!(a, derive_seed(7, Stream::DropKey, &[1, 2, 3]));
        assert_ne!(a, derive_seed(8, Stream::Rewire, &[1, 2, 3]));
    }
}
