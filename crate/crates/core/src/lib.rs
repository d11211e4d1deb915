//! Sleep replay consolidation for small dense classifiers.
//!
//! Train a bias-free ReLU network on a (possibly tiny, imbalanced or
//! sequential) slice of MNIST / Fashion-MNIST, then run an unsupervised
//! spiking "sleep" phase in which Bernoulli input noise drives the converted
//! network and a local two-case Hebbian rule reshapes its weights.
//!
//! - [`nn`]: network, loss, SGD training and snapshots
//! - [`data`]: IDX loading, balanced / imbalanced / two-task subsets, pixel means
//! - [`sleep`]: conversion scales, spiking dynamics, plasticity and traces
//! - [`metrics`]: accuracy, per-class recall and confusion matrices
//! - [`harness`]: the limited-data, imbalanced and continual experiment families
//! - [`ga`]: genetic search over sleep hyperparameters
//!
//! The numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix it to one width. Experiments use `f64`.

pub mod config;
pub mod data;
pub mod error;
pub mod ga;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod sleep;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type Mlp64 = nn::Mlp<f64>;
pub type Mlp32 = nn::Mlp<f32>;
pub type DatasetSlice64 = data::DatasetSlice<f64>;
pub type DatasetSlice32 = data::DatasetSlice<f32>;
pub type PixelMean64 = data::PixelMean<f64>;
pub type PixelMean32 = data::PixelMean<f32>;
pub type LayerScales64 = sleep::LayerScales<f64>;
pub type SleepTrace64 = sleep::SleepTrace<f64>;
