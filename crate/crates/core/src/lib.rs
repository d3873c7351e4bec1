//! PlantXViT: a hybrid CNN / vision-transformer image classifier, built on
//! an in-crate tensor core with reverse-mode automatic differentiation.

pub mod data;
pub mod error;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, Element, GradTape, Gradients, Init, Padding, Tensor, TensorId};
