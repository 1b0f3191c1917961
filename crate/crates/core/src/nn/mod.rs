//! Dense tensors and feed-forward networks with hand-derived gradients.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod network;
mod params;
mod real;
mod schedule;
mod spectral;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient, LossKind};
pub use network::{
    backward, backward_input, backward_params, forward, init_embedding_row, init_params, Activation, EmbeddingSpec,
    ForwardCache, LayerSpec, NetworkSpec,
};
pub use params::ParamSet;
pub use real::Real;
pub use schedule::lr_schedule;
pub use spectral::{
    init_spectral, refresh_spectral, spectral_normalize, SpectralNormState, SpectralSet,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    UnknownLabel { label: usize, classes: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("cache does not belong to network `{0}`")]
    StaleCache(String),
    #[error("degenerate weight `{name}`: spectral norm estimate {sigma:e} below 1e-12")]
    DegenerateWeight { name: String, sigma: f64 },
    #[error("iteration {iter} beyond schedule length {total}")]
    ScheduleOutOfRange { iter: u64, total: u64 },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
