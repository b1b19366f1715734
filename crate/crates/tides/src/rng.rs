//! Deterministic random number generation.
//!
//! All randomness in the crate flows from a single `u64` seed through named
//! substreams. The generator is ChaCha with 8 rounds; substreams use the
//! ChaCha stream counter, derived from the label by FNV-1a hashing, so that
//! independent components (data generation, initialization, dropout, drop
//! plans, ...) never share a stream. No wall-clock or OS entropy is used
//! anywhere in a computational path.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a label, used as a ChaCha stream id.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A named, independent generator derived from the run seed.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// Substream further split by an integer index (sweep cells, batch steps).
pub fn substream_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label) ^ index.wrapping_mul(0x9e3779b97f4a7c15));
    rng
}
