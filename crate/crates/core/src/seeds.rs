//! Counter-derived random streams.
//!
//! Every random draw in training comes from a stream keyed by
//! `(base seed, tag, counters)` instead of one long shared stream, so a
//! resumed run can reconstruct exactly the draws it needs from plain
//! integers in the checkpoint manifest.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed, a stream tag and two counters into one u64.
pub fn derive(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for byte in tag.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = splitmix(h ^ splitmix(a));
    splitmix(h ^ splitmix(b).rotate_left(17))
}

/// A fresh generator for the given stream coordinates.
pub fn rng(base: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, a, b))
}
