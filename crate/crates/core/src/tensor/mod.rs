//! Dense tensors and a small reverse-mode differentiation tape.

mod array;
pub mod fft;
mod gradcheck;
mod mask;
mod ops;
mod tape;

pub use array::Tensor;
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, TensorCheck};
pub use mask::Mask;
pub use ops::{GELU_C, LAYER_NORM_EPS};
pub use tape::{FlopCounter, Gradients, OpKind, Tape, Var};
