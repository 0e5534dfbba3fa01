//! Building blocks for evaluating unsupervised domain-adaptation objectives
//! at desk scale: dense-matrix numerics, transfer losses (covariance
//! alignment, linear maximum mean discrepancy, conditional adversarial with
//! optional entropy conditioning) with analytic gradients, small
//! feed-forward classifier/discriminator networks, seeded SGD training
//! loops, synthetic domain-shift generators, and a finite-difference oracle
//! that checks every gradient the trainer applies.
//!
//! All arithmetic is `f64` and every source of randomness is a splittable
//! seeded stream, so runs are bit-reproducible. With the default `parallel`
//! feature the large inner loops use rayon; results are bit-identical to the
//! sequential fallback.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use losses::{GradPair, LambdaSchedule, TransferLossKind};
pub use matrix::Matrix;
pub use train::{ArchConfig, EpochRecord, TrainConfig};
