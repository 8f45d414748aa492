//! Seed derivation and hashing helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// SplitMix64 step; used to fold tags into seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stream-independent RNG from a base seed and a tag path.
///
/// All randomness in the crate is drawn through this, keyed by explicit
/// counters (scene index, epoch, step, ...), so any run can be resumed
/// mid-stream without serializing generator state.
pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x72a7_5bd1_0f2c_9e4d);
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stable tag from a short ASCII label, for readable seed paths.
pub const fn tag(label: &str) -> u64 {
    // FNV-1a, const-evaluable.
    let bytes = label.as_bytes();
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x100000001b3);
        i += 1;
    }
    hash
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
