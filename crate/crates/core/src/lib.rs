//! Core of a streaming audio-to-motion generation stack.
//!
//! Everything in this crate is allocation-only (`no_std` + `alloc`): the
//! reverse-mode autodiff tape, skeleton kinematics, the causal RVQ motion
//! tokenizer, token corruption, the autoregressive generator, reward models,
//! policy alignment objectives, evaluation metrics, and the chunked streaming
//! engine. File formats, wall clocks, and the command line live in the
//! `motionstream` companion crate.
#![no_std]

extern crate alloc;

pub mod audio;
pub mod benchmarks;
pub mod collapse;
pub mod corruption;
pub mod crossroad;
pub mod error;
pub mod generator;
pub mod graph;
pub mod kinematics;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rewards;
pub mod rl;
pub mod streaming;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a seed.
pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
