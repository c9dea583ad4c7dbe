pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod nn;

pub use error::{Error, Result};
