//! Deterministic random-stream derivation.
//!
//! Every source of randomness in the pipeline draws from a generator derived
//! here from the root seed plus a purpose label and integer coordinates
//! (epoch, batch, image, …). Streams are independent of execution order, so
//! prefetch workers, a different worker count, or a resume from checkpoint
//! all reproduce the exact same draws.

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Generator for the stream identified by `(seed, label, coords)`.
pub fn stream(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    for &c in coords {
        h.update([1u8]);
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
