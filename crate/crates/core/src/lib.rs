pub mod architectures;
pub mod binarizer;
pub mod cells;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
