//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`]: a ChaCha8 generator
//! keyed by the run seed, with the ChaCha stream id selecting an independent
//! sub-stream per purpose. ChaCha8 output is fully specified and independent
//! of platform endianness, so masks, initializations and attack directions are
//! reproducible from `(seed, purpose, index)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named sub-streams derived from the single run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Mask = 1,
    Init = 2,
    BatchOrder = 3,
    Attack = 4,
    Data = 5,
    Oracle = 6,
    Power = 7,
    Split = 8,
}

/// Generator for `purpose`, further split by `index` (sample number, layer,
/// restart, ...). Distinct `(purpose, index)` pairs never share a stream.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// SplitMix64 finalizer, used to derive child seeds (e.g. per sweep cell).
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = stream(7, Purpose::Mask, 0).random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, Purpose::Mask, 0).random_iter().take(4).collect();
        let c: Vec<u64> = stream(7, Purpose::Attack, 0).random_iter().take(4).collect();
        let d: Vec<u64> = stream(7, Purpose::Mask, 1).random_iter().take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn mix_spreads_nearby_seeds() {
        assert_ne!(mix(1, 0), mix(2, 0));
        assert_ne!(mix(1, 0), mix(1, 1));
        assert_eq!(mix(42, 3), mix(42, 3));
    }
}
