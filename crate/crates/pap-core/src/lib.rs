//! Desk-scale toolkit for adversarial patch attacks on density-map crowd
//! counting models: a small reverse-mode tensor engine, two toy counting
//! networks, geometry-adaptive density maps, the perceptual patch generator
//! with its scale/position losses, transfer-attack baselines, adversarial
//! training, and the evaluation/report machinery tying them together.

pub mod advtrain;
pub mod attack;
pub mod baselines;
pub mod density;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};

/// The deterministic generator used throughout; one seed, one stream.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
