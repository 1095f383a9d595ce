//! VCMamba: a hybrid convolutional / multi-directional selective-scan vision
//! backbone, together with the small tensor and autodiff engine it runs on.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod harness;
pub mod init;
pub mod model;
pub mod params;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
pub use params::{Mode, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
