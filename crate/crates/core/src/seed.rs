//! Stable seed derivation so parallel tasks own independent RNG streams.

use sha2::{Digest, Sha256};

/// Hash of a global seed plus string/integer tags, folded to 64 bits.
pub fn derive_seed(global: u64, tags: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    for t in tags {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
