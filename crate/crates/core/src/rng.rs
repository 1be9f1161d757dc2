//! Seed handling. Every stochastic step draws from a ChaCha stream whose seed
//! is derived from the single master seed by a stable index, so results never
//! depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream identifiers used by the pipeline. Kept in one place so two
/// components never share a stream by accident.
pub mod streams {
    pub const SHIFT: u64 = 1;
    pub const WEIGHTS: u64 = 2;
    pub const LEARN: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
    pub const CDE: u64 = 6;
}
