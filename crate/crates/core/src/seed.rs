//! Seed derivation.
//!
//! Every stochastic sub-task of a run receives its own seed, derived from the
//! master seed by hashing a textual label and an integer index:
//!
//! ```text
//! derive(parent, label, index) = splitmix64(parent ^ fnv1a(label) ^ splitmix64(index))
//! ```
//!
//! Labels name the sub-task ("reset", "act", "member", ...), the index
//! disambiguates repeated jobs of the same kind. Derivation is a pure function,
//! so re-running any job in isolation reproduces its random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from `parent` for the sub-task `label` / `index`.
pub fn derive(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(parent ^ fnv1a(label) ^ splitmix64(index))
}

/// Derive along a path of indices, e.g. `(source, target, timestep)`.
pub fn derive_path(parent: u64, label: &str, path: &[u64]) -> u64 {
    path.iter().fold(derive(parent, label, path.len() as u64), |acc, &i| derive(acc, label, i))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
