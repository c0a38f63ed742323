//! Training engine for dual-mixing graph collaborative filtering.
//!
//! The pipeline: ingest implicit-feedback interactions into a normalized
//! bipartite graph ([`dataset`]), propagate an embedding table over it with
//! a linear graph convolution ([`encoder`]), augment each mini-batch with
//! disorder / individual-mix / collective-mix views ([`mixing`]), combine
//! ranking and dual-mixing contrastive losses ([`objective`]), optimize the
//! table with exact gradients and Adam ([`trainer`]), and score the result
//! with all-ranking top-N metrics ([`eval`]).

pub mod dataset;
pub mod encoder;
mod error;
pub mod eval;
pub mod mat;
pub mod mixing;
pub mod objective;
mod real;
pub mod trainer;

pub use error::{MixRecError, Result};
pub use real::{Precision, Real};

use rand_chacha::ChaCha8Rng;

/// The deterministic generator used throughout the engine.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
