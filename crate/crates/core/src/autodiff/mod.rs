//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! and whatever it needs for the backward pass. [`Graph::backward`] walks the
//! tape once in reverse order. Parameters live outside the tape in a
//! [`ParamStore`] and are bound per forward pass; [`Adam`] updates the store
//! from the resulting [`Gradients`].

mod adam;
mod gemm;
mod graph;
pub mod gradcheck;
mod store;
mod tensor;

pub use adam::Adam;
pub use gemm::gemm;
pub use graph::{Gradients, Graph, Mode, Var};
pub use store::{ParamId, ParamStore};
pub use tensor::Tensor;
