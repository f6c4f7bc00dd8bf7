//! Wildfire smoke detection at desk scale.
//!
//! A from-scratch reverse-mode kernel drives a small windowed-attention
//! detector whose patch embedding is augmented with multi-stride horizontal
//! and vertical contrast masks. Training samples negative locations
//! separately for images with and without smoke. Evaluation scores boxes
//! (AP at IoU 0.1), images and videos (max-score aggregation, Mann-Whitney
//! AUC), plus threshold metrics and time to detection.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the two instantiations.

pub mod assign;
pub mod autodiff;
pub mod boxes;
pub mod ccpe;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = param::ParamStore<f32>;
pub type ParamStore64 = param::ParamStore<f64>;
