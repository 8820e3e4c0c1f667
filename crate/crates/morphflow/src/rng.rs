//! Seedable randomness, pinned to one portable generator.
//!
//! Everything random in this crate flows through [`seeded`] so that a given
//! seed produces bit-identical streams on every platform. ChaCha8 is a
//! counter-based generator with a stable, documented output sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The pinned generator type.
pub type Rng = ChaCha8Rng;

/// Build the pinned generator from a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a stream index.
///
/// SplitMix64 finalizer; used to give each dataset pair, layer, or sweep run
/// its own decorrelated stream without consuming the base generator.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn seeded_stream_is_reproducible() {
        let mut r1 = seeded(7);
        let mut r2 = seeded(7);
        let a: Vec<u64> = (0..8).map(|_| r1.random()).collect();
        let b: Vec<u64> = (0..8).map(|_| r2.random()).collect();
        assert_eq!(a, b);
        assert_ne!(a, (0..8).map(|_| seeded(8).random()).collect::<Vec<u64>>());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        let s: Vec<u64> = (0..16).map(|i| derive_seed(42, i)).collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
