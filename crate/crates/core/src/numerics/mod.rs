//! Dense tensors, reverse-mode autodiff and per-example gradients.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{softmax_rows, Bound, Graph, Reduction, Var};
pub use layers::{
    forward, gradient, per_example_gradients, Activation, ConvLayer, DenseLayer, Identity, Mlp,
    Module,
};
pub use params::ParameterSet;
pub use tensor::{Real, Tensor};
