//! Recall@k surrogate training toolkit.
//!
//! The crate provides a differentiable surrogate of recall@k for deep metric
//! learning together with the machinery needed to train and evaluate with it
//! at desk scale:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`numerics`] | matrices, stable sigmoid, L2 normalisation, pairwise similarities |
//! | [`rsloss`] | surrogate loss value and exact gradients w.r.t. every similarity |
//! | [`simix`] | virtual examples mixed in similarity space, and the adjoint map |
//! | [`sampler`] | class-balanced mini-batches |
//! | [`encoder`] | linear / MLP embedding head with manual backprop and Adam |
//! | [`trainer`] | two-pass memory-bounded training step and the training loop |
//! | [`retrieval_eval`] | exact rank, recall@k, r@k and mAP |
//! | [`dataio`] | synthetic data, dataset text format, checkpoints |
//! | [`config`] | `key=value` experiment configuration |
//! | [`gradcheck`] | end-to-end finite-difference gradient check |
//!
//! ```
//! use rankloss_kit::numerics::Matrix;
//! use rankloss_kit::rsloss::{rs_loss, LossConfig};
//!
//! let sims = Matrix::from_rows(&[
//!     vec![1.0, 0.9, 0.1],
//!     vec![0.9, 1.0, 0.2],
//!     vec![0.1, 0.2, 1.0],
//! ]).unwrap();
//! // the last example has no positive, so the batch is rejected
//! assert!(rs_loss(&sims, &[0, 0, 1], &LossConfig::default()).is_err());
//! ```

pub mod config;
pub mod dataio;
pub mod encoder;
pub mod gradcheck;
mod error;
pub mod numerics;
pub mod retrieval_eval;
pub mod rsloss;
pub mod sampler;
pub mod simix;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic random stream used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random stream from a seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
