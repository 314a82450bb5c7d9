//! Seeded substream derivation.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! `(root seed, domain label, indices)`. Two call sites that derive the same
//! triple get identical streams, and no call site ever observes another's
//! draws, so parallel execution cannot change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the deterministic RNG for `(seed, domain, indices)`.
pub fn substream(seed: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ fnv1a64(domain.as_bytes()));
    for &ix in indices {
        state = splitmix64(state ^ ix);
    }
    ChaCha8Rng::seed_from_u64(state)
}
