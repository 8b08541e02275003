//! Dense linear-algebra substrate shared by every stage.

mod decomp;
mod hadamard;
mod matrix;

pub use decomp::{cholesky_lower, eig_gram, spd_inverse, svd, Svd};
pub use hadamard::{
    blockwise_hadamard, hadamard_matrix, incoherence, is_power_of_two, random_hadamard,
    walsh_hadamard, walsh_hadamard_in_place, HadamardSpec, OnlineHadamard,
};
pub use matrix::DenseMatrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator used everywhere randomness enters the pipeline.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
