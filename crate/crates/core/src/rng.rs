//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by a base seed and
//! a short tag path (e.g. `[STEP, step, NOISE]`), so any draw can be replayed
//! without carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SCENE: u64 = 0x5343_454e;
pub const INIT: u64 = 0x494e_4954;
pub const STEP: u64 = 0x5354_4550;
pub const NOISE: u64 = 0x4e4f_4953;
pub const MASK: u64 = 0x4d41_534b;
pub const ORDER: u64 = 0x4f52_4445;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ splitmix(t));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(state.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
