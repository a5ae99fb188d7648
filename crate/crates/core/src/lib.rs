pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod sbpca;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
