//! Minimal dense-tensor engine: NCHW layout, reverse-mode autodiff on a
//! recorded tape, 32- and 64-bit precisions.

pub mod element;
pub mod error;
pub mod io;
pub mod kernels;
pub mod rng;
pub mod shape;
pub mod tape;
pub mod tensor;

pub use element::{Dtype, Element};
pub use error::{Result, TensorError};
pub use rng::Rng;
pub use shape::Shape;
pub use tape::{Grads, Op, Tape, Var};
pub use tensor::Tensor;
