//! Dense tensors, a static computation graph with reverse-mode
//! differentiation, optimisers and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId, Param, ParamId, ParamStore, Tag};
pub use optim::{step_adam, xavier_uniform, Adam, AdamConfig, Sgd};
pub use tensor::Tensor;
