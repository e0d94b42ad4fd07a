//! Mixture of LoRA experts with layer-wise expert allocation.
//!
//! The crate is generic over the floating point element type through
//! [`Scalar`]; the `*64` aliases below are the reference precision used by
//! tests and gradient checks, the `*32` aliases an opt-in training mode.

pub mod adapters;
pub mod allocation;
pub mod analysis;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod tasks;

pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type AdaptedModel64 = model::AdaptedModel<f64>;
pub type AdaptedModel32 = model::AdaptedModel<f32>;
pub type Trainer64 = model::Trainer<f64>;
pub type Trainer32 = model::Trainer<f32>;
