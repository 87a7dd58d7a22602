pub mod alignment;
pub mod checkpoint;
pub mod codecs;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod integrity;
pub mod error;
pub mod joint;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::{grad_check, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
