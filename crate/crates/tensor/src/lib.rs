//! Minimal tensor and reverse-mode autodiff engine, generic over the scalar
//! type. Models build a fresh [`Graph`] per forward pass, bind their
//! [`ParamStore`] into it and call [`Graph::backward`] on a scalar loss.

pub mod conv;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Bound, Grads, Graph, Var};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
