//! Trainable temporal-channel transformer pipeline for bird's-eye-view
//! Lidar object detection, on a self-contained reverse-mode autodiff core.
//!
//! The numeric substrate is generic over the scalar type: training runs in
//! `f32`, gradient checking in `f64`. Concrete aliases live at the crate
//! root.

pub mod autodiff;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod model;
pub mod params;
pub mod pillars;
pub mod refine_head;
pub mod rng;
pub mod scalar;
pub mod synthlidar;
pub mod tctr;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
