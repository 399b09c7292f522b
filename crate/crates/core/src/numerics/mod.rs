//! Dense f64 tensors, a recorded graph with reverse-mode gradients, AdamW,
//! a 3x3 SVD, finite-difference checking and the checkpoint format.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sinusoidal_embedding, Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig};
pub use params::ParameterStore;
pub use tensor::Tensor;
