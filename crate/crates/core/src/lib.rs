pub mod ad;
pub mod cli;
pub mod convert;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod mesh;
pub mod nn;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
