//! Seed fan-out. One master seed is split into named sub-seeds so every stage
//! (data, init, train, sample, eval) draws from its own reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 64-bit sub-seed from `master` and a label.
pub fn derive(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha stream keyed by `(master, label)`.
pub fn rng_for(master: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
