//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A forward pass is recorded on a [`Tape`]: every primitive application
//! pushes a node holding its output value, its inputs, and the attributes its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for every leaf that requires one. Tapes are single-use;
//! build a fresh one per training step.
//!
//! Model code runs in `f32`. The same tape works over `f64`, which the
//! gradient-check tests use to get headroom on finite differences.

mod element;
pub mod io;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use kernels::conv_out_dim;
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
