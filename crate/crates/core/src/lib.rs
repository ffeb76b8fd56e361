//! Noisy-label learning on long-tailed data: distribution-aware class
//! centroids, GMM clean-sample selection, balanced and instance-level
//! contrastive losses, and a two-network MixMatch-style trainer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the width for callers that do not care.

pub mod centroid;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matrix;
pub mod net;
pub mod scalar;
pub mod select;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type ModelState64 = net::ModelState<f64>;
pub type ModelState32 = net::ModelState<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
