//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is drawn from a ChaCha generator
//! seeded by the experiment's master seed plus a purpose tag, so stages
//! can reproduce each other's draws without sharing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a master seed and a purpose tag.
pub fn derive(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// ChaCha generator for the given master seed and purpose tag.
pub fn rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag))
}
