//! Small, deterministic CPU tensor library with tape-based reverse-mode
//! autodiff, the handful of layers a convolutional U-Net needs, and AdamW.
//!
//! Everything runs on the calling thread. Given identical inputs and the
//! same sequence of operations, results are bitwise reproducible.

mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{row_cosines, Gradients, Graph, Var};
pub use layers::{normal_tensor, uniform_tensor, Conv2d, GroupNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed parameter data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
