//! Deterministic seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! key is derived from a master seed and a path of integer tags (cell,
//! iteration, test, variable, ...). Results therefore do not depend on the
//! order in which work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the four tests.
pub mod tag {
    pub const CRSE: u64 = 1;
    pub const SV: u64 = 2;
    pub const VMB: u64 = 3;
    pub const WCR: u64 = 4;
    pub const DGP: u64 = 16;
    pub const BATTERY: u64 = 32;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a path of tags into a master seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Independent generator for substream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
