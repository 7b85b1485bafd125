//! Seed derivation.
//!
//! A single root seed expands into independent child streams. The child seed
//! for a purpose string is the first eight bytes (little-endian) of
//! `SHA-256(root_seed.to_le_bytes() || purpose)`, and each stream is a
//! ChaCha8 generator seeded with it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 50;

pub fn child_seed(root: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(root: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(child_seed(root, purpose))
}
