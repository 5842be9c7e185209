//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every primitive applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates `d root / d node` into every node that depends on a
//! trainable leaf. Parameters live outside the graph in [`Params`] and are
//! bound as named leaves for each forward pass.
//!
//! Broadcasting is limited to scalar-with-tensor operands and row-vector
//! bias addition; any other shape mismatch is a shape error.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Primitive, Var, MIN_NORM};
pub use optim::{sgd_step, Adam, BoundParams, Optimizer, OptimizerKind, Params, Sgd};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
