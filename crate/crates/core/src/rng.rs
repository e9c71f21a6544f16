//! Labeled deterministic random streams derived from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte seed from `(master, label, index)`.
pub fn substream_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dsfl/stream/v1");
    h.update(master.to_le_bytes());
    h.update((label.len() as u32).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// A ChaCha20 stream for the given label and index.
pub fn substream(master: u64, label: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(substream_seed(master, label, index))
}
