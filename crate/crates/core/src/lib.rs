//! Diffusion-based visual counterfactual explanations at desk scale.
//!
//! Datasets, the denoiser and classifier zoo, the diffusion process,
//! classifier-guided counterfactual sampling and the evaluation metrics.

pub mod data;
pub mod diffusion;
pub mod guidance;
pub mod metrics;
pub mod models;

use tensorgrad::TensorError;
use thiserror::Error;

pub use data::DataError;

#[derive(Debug, Error)]
pub enum VceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {t} outside [0, {steps})")]
    Step { t: usize, steps: usize },
    #[error("alpha_bar at step {t} is {alpha_bar:e}, too small to invert")]
    Degenerate { t: usize, alpha_bar: f64 },
    #[error("non-finite {what} at step {t}")]
    NonFiniteStep { what: &'static str, t: usize },
    #[error("non-finite guidance gradient at step {t} (norm {norm})")]
    Gradient { t: usize, norm: f64 },
    #[error("undefined cone axis: subject gradient is zero")]
    ConeAxis,
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model: {0}")]
    Model(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VceError> = std::result::Result<T, E>;

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
