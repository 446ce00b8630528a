//! Seed derivation. Every random draw in the crate comes from a `ChaCha8Rng`
//! whose 32-byte seed is a SHA-256 over a domain tag and the caller's inputs,
//! so a single master seed fixes every experiment.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// `sub_seed_i = SHA-256(master_le || component || i_le)`, first 8 bytes LE.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// A generator keyed by a domain tag and arbitrary byte parts.
pub fn rng_for(domain: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_le_bytes());
    h.update(domain.as_bytes());
    for p in parts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn rng_from_seed(domain: &str, seed: u64) -> ChaCha8Rng {
    rng_for(domain, &[&seed.to_le_bytes()])
}
