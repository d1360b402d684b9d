//! Deterministic seed derivation.
//!
//! All randomness in the artifact flows from one root seed. Sub-streams are
//! derived by mixing the root with a stream tag, so that per-sample and
//! per-step streams are independent of worker count and execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with a sequence of stream identifiers.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ 0x5851_f42d_4c95_7f2d);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

/// Hash a string tag into a stream identifier.
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded ChaCha stream for a derived seed.
pub fn rng_for(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, parts))
}
