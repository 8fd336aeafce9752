//! Seed derivation and fingerprint helpers shared across the crate.

use sha2::{Digest, Sha256};

/// Hex digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// Deterministic child seed from a master seed and a stream tag.
///
/// Every randomized stage of the pipeline draws from its own tagged stream,
/// so reordering stages or changing batch counts in one stage never shifts
/// the randomness of another.
pub fn child_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let out = hasher.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is at least 8 bytes"))
}
