//! Named deterministic random streams.
//!
//! Every source of randomness in the pipeline is a named stream derived from
//! one experiment seed, so adding parallelism or reordering work never
//! changes results. Stream identity is `(seed, name, indices)`; the same
//! triple always yields the same generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(seed: u64, name: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(name.as_bytes());
    for ix in indices {
        hasher.update([0xfe]);
        hasher.update(ix.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Generator for the named stream.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, name, &[]))
}

/// Generator for a named stream refined by indices (round, client, sample...).
pub fn substream(seed: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(seed, name, indices))
}

/// A u64 seed derived from the named stream, for handing to operations that
/// take a seed argument and derive their own streams internally.
pub fn derive_seed(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let bytes = digest(seed, name, indices);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}
