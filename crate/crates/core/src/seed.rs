//! Every random stream is derived from one user seed by labeled hashing, so
//! adding a new consumer never shifts the draws of an existing one.

use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn derive_indexed_seed(seed: u64, label: &str, index: usize) -> u64 {
    derive_seed(derive_seed(seed, label), &index.to_string())
}
