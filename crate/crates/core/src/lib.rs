//! TopFormer inference engine, cost analyzer and gradient-check harness.

pub mod analyzer;
pub mod autodiff;
pub mod checks;
pub mod error;
pub mod iofmt;
pub mod model;
pub mod tensor;

pub use error::{BindError, Error, Result};
pub use iofmt::WeightStore;
pub use model::{ForwardOptions, HeadKind, Model, Variant, VariantConfig};
pub use tensor::{ConvSpec, Dims, Tensor};
