//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 generator keyed by the run
//! seed and a stream id. ChaCha is counter based, so distinct stream ids give
//! independent sequences from the same seed, and the word position can be
//! saved and restored for checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids used by market simulation.
pub mod streams {
    pub const COVARIATES: u64 = 0;
    pub const STUDENT_SHOCKS: u64 = 1;
    pub const COLLEGE_SHOCKS: u64 = 2;
    pub const LOTTERY: u64 = 3;
    /// Gibbs chains use `GIBBS_BASE + chain index`.
    pub const GIBBS_BASE: u64 = 1 << 16;
    /// Counterfactual and fit simulations use `SIMULATION_BASE + draw index`.
    pub const SIMULATION_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derives the seed of the `index`-th Monte Carlo sample from a base seed.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
