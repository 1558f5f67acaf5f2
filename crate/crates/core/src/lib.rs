//! Image inpainting with Euler's elastica energy and a deep image prior.

pub mod energy;
pub mod error;
pub mod image_io;
pub mod network;
pub mod optimizer;
pub mod presets;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
