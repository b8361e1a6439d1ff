//! Seed derivation.
//!
//! Every random stream in the crate is derived from one `u64` root seed by a
//! counter-based rule:
//!
//! ```text
//! stream_seed(root, domain, index) =
//!     splitmix64(splitmix64(root ^ fnv1a64(domain)) ^ splitmix64(index + 1))
//! ```
//!
//! and the resulting value seeds a `ChaCha8Rng`. Streams with different
//! domain tags or indices are independent for practical purposes, and the
//! mapping is stable across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn stream_seed(root: u64, domain: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(domain.as_bytes())) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(root: u64, domain: &str, index: u64) -> Rng {
    Rng::seed_from_u64(stream_seed(root, domain, index))
}
