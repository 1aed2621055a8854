//! Multi-scale bottleneck transformer for weakly supervised multimodal
//! violence detection, with its own reverse-mode autodiff.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod modality;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use modality::Modality;
pub use model::{Model, ModelConfig};
pub use scalar::Scalar;
pub use trainer::TrainConfig;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
