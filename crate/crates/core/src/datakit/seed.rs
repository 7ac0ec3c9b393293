//! Splittable seeding: every consumer of randomness derives its own stream
//! from a root seed and a purpose string.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identity of the generator recorded in run metadata.
pub const GENERATOR_ID: &str = "chacha8 (rand_chacha 0.9), sub-seeds = sha256(root_le || purpose)[..8]";

pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(root: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose))
}
