//! Seed derivation. Every stage draws from its own named stream so that
//! re-running one stage in isolation reproduces its output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Deterministic generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> StageRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Independent per-item stream (e.g. one per example index) under a named stage.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StageRng {
    let mut rng = stream(seed, name);
    rng.set_stream(index);
    rng
}
