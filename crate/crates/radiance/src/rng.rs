//! Seeded RNG sub-streams.
//!
//! Every source of randomness in the crate is derived from one root seed plus
//! a stream name (and an optional index, e.g. a ray id), so that runs are
//! reproducible and independent of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over the name and index, mixed with the root seed.
pub fn stream_key(seed: u64, name: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.bytes().chain(index.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// A named sub-stream of the root seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    indexed_stream(seed, name, 0)
}

/// A named sub-stream with an index (per-ray, per-step, ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, name, index))
}
