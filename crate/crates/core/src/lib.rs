//! Transformer pretraining with relative-position prediction objectives.
//!
//! Besides a masked-token baseline, the crate trains an encoder to recover
//! the signed offsets `j - i` between token pairs after their position
//! signal has been masked or permuted. Offsets are read out from the last
//! attention layer's per-head query·key scores.

pub mod corpus;
pub mod eval;
pub mod exec;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` under `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combine two seeds into one (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
