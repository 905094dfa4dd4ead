//! Reverse-mode differentiation, parameter storage, Adam, and small dense networks.

mod array;
pub mod checkpoint;
mod graph;
mod nn;
mod params;

pub use array::Array;
pub use graph::softmax_rows;
pub use graph::{Gradients, Graph, Var};
pub use nn::{Activation, Mlp};
pub use params::{Binder, Parameter, ParameterStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[cfg(test)]
mod tests;
