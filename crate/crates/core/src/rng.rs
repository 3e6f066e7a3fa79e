//! Counter-derived random streams.
//!
//! Every random draw in the crate comes from a stream keyed by the master
//! seed plus a short tuple of counters (purpose tag, epoch, tuple index…),
//! so results do not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod tag {
    pub const DATA: u64 = 0xD47A;
    pub const INIT: u64 = 0x1217;
    pub const TRAIN: u64 = 0x7A12;
    pub const SHUFFLE: u64 = 0x5AFF;
    pub const SAMPLE: u64 = 0x5A3B;
    pub const EVAL: u64 = 0xE7A1;
    pub const MCMC: u64 = 0x3C3C;
    pub const PATHS: u64 = 0x9A75;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut state = seed;
    let mut h = splitmix64(&mut state);
    for &k in keys {
        state ^= k.wrapping_mul(0xA24B_AED4_963E_E407).rotate_left(17) ^ h;
        h = splitmix64(&mut state);
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
