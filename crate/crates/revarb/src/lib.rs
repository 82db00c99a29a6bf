//! Deep recurrent Gaussian processes with latent autoregressive states.
//!
//! The model stacks GP transition layers whose regressors are lagged latent
//! states (plus lagged exogenous inputs at the first layer), trained by
//! maximizing an analytic sparse-variational lower bound, and evaluated by
//! free simulation with moment-based uncertainty propagation.

pub mod bound;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gpnarx;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod persist;
pub mod predict;
pub mod psi;
pub mod recognition;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete `f64` aliases for the common case.
pub type KernelParamsF64 = kernel::KernelParams<f64>;
pub type PsiStatsF64 = psi::PsiStats<f64>;
pub type RevarbStateF64 = model::RevarbState<f64>;
pub type OptimalQzF64 = bound::OptimalQz<f64>;
pub type GpNarxModelF64 = gpnarx::GpNarxModel<f64>;
pub type RecognitionNetF64 = recognition::RecognitionNet<f64>;
pub type SequenceDatasetF64 = data::SequenceDataset<f64>;
