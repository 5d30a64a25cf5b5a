//! Multimodal target speaker extraction on a from-scratch autodiff core.

pub mod cli;
pub mod cues;
pub mod dsp;
pub mod error;
pub mod objective;
pub mod scalar;
pub mod scenes;
pub mod separator;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ModelInput32 = separator::ModelInput<f32>;
pub type ModelInput64 = separator::ModelInput<f64>;
