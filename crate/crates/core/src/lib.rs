pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod relations;
pub mod report;
pub mod seeds;
pub mod tensor;
pub mod vit;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
