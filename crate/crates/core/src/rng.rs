//! Counter-keyed random streams.
//!
//! Every random draw in the sampler comes from a ChaCha stream whose key is
//! derived from `(seed, purpose, a, b)`. Streams never depend on which worker
//! thread consumes them, so results are identical for any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; keeps streams for different stages disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Resample = 2,
    Sweep = 3,
    Suite = 4,
    Noise = 5,
}

pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit seed derived from a base seed and a label (e.g. a file name).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Purpose::Sweep, 3, 11).random();
        let b: u64 = stream(7, Purpose::Sweep, 3, 11).random();
        let c: u64 = stream(7, Purpose::Sweep, 3, 12).random();
        let d: u64 = stream(7, Purpose::Init, 3, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn derived_seed_depends_on_label() {
        assert_eq!(derive_seed(1, "a.csv"), derive_seed(1, "a.csv"));
        assert_ne!(derive_seed(1, "a.csv"), derive_seed(1, "b.csv"));
        assert_ne!(derive_seed(1, "a.csv"), derive_seed(2, "a.csv"));
    }
}
