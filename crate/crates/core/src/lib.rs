//! HyperMixer: MLP-based token mixing with hypernetwork-generated weights,
//! the baselines it is compared against, and the experiment harness around
//! them (FLOP accounting, wall-clock benchmarks, a synthetic attention task,
//! text classification and hyperparameter-search statistics).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod bench;
pub mod error;
pub mod flops;
pub mod layers;
pub mod model;
pub mod param;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use param::{Param, ParamId, Parameterized};
pub use scalar::Scalar;
pub use tensor::{FlopCounter, Gradients, Mask, OpKind, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
