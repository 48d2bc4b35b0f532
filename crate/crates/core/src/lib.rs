//! Detection network, metrics and data pipeline for orchard fruit detection.
//!
//! Numerics are generic over [`Scalar`] (`f32` for inference, `f64` for
//! gradient checks); the aliases below name the two concrete instantiations.

pub mod bbox;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod nn;
pub mod rng;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = network::Model<f32>;
pub type Model64 = network::Model<f64>;
