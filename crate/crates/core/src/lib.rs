pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod param;
pub mod peft;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
