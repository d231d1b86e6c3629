//! Hybrid 2D/3D medical image segmentation with cross-dimensional slice
//! attention, written against a small CPU autodiff engine.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod memest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use graph::{Fault, Gradients, Graph, Var};
pub use model::{ScaaConfig, ScaaModel, Variant};
pub use nn::ParamStore;
pub use tensor::{Float, Tensor};
