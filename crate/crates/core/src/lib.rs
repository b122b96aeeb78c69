pub mod context;
pub mod corpus;
pub mod error;
pub mod kv;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
pub use transformer::{IntegrationMode, Model, ModelConfig};
