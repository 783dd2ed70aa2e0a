//! Minimal neural-network toolkit: tensors, a per-sample autodiff tape,
//! 3D convolution layers and Adam.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, ParamId, ParamStore, Var};
pub use layers::{Conv3d, Linear};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
