//! Seeded randomness. All randomness in the crate flows from one root seed
//! through named sub-streams, so pretraining / training / evaluation can each
//! be reproduced independently.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit FNV-1a. Used instead of `DefaultHasher` so sub-stream
/// derivation never changes across std releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a deterministic sub-seed from a root seed and a stream name.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    fnv1a(&[&root.to_le_bytes()[..], name.as_bytes()].concat())
}

/// RNG for a named sub-stream of the root seed.
pub fn substream(root: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(substream_seed(root, name))
}

/// Stable hash of arbitrary bytes, exposed for config fingerprints.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    fnv1a(bytes)
}

/// Standard normal draw via Box–Muller.
pub fn randn(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
