//! Deterministic RNG streams.
//!
//! Every random choice in the crate draws from a ChaCha12 stream keyed by
//! (seed, label). Keying through SHA-256 keeps streams independent across
//! labels and identical across platforms, which is what the bit-reproducibility
//! contracts (splits, shuffles, synthetic data, init) rely on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// A seeded RNG dedicated to one purpose, e.g. `stream(7, "split")` or
/// `stream(seed, &format!("shuffle/{epoch}"))`.
pub fn stream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(key)
}
