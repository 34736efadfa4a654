//! Intention-conditioned value functions (ICVFs) on tabular worlds.
//!
//! The crate learns multilinear ICVFs `φ(s)ᵀ T(z) ψ(s₊)` from passive,
//! action-free observation sequences with expectile temporal-difference
//! learning, and checks everything it learns against exact successor-matrix
//! oracles.
//!
//! Layout:
//! - [`mdp`]: tabular MDPs, gridworlds, value iteration, rollouts
//! - [`data`]: passive datasets, the transition/outcome/intent sampler, file format
//! - [`oracle`]: exact successor matrices and ICVFs, Monte Carlo and Bellman checks
//! - [`model`]: the multilinear ICVF, its ablation baselines, checkpoints
//! - [`train`]: expectile TD training with a polyak-averaged target copy
//! - [`probe`]: linear probes, the downstream-approximation bound, downstream TD

pub mod data;
pub mod error;
pub mod linalg;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod probe;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent generator for a named sub-stream of a run seed.
pub fn derived_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
