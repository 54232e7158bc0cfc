//! Canvas-conditioned masked autoregressive video generation.
//!
//! Model code is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix the precision used for training and sampling.

pub mod dataeval;
pub mod error;
pub mod generation;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod training;
pub mod video;

pub use error::{Error, Result};
pub use video::Video;

pub type Model = model::CanvasMar<f32>;
pub type Model64 = model::CanvasMar<f64>;
pub type Tensor = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Frame = nn::TokenGrid<f32>;
pub type OptState = numerics::OptState<f32>;
