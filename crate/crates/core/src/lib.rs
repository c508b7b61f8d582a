pub mod array;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grad;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod scalar;
pub mod teacher;
pub mod trajectory;
pub mod transfer;

pub use array::DenseArray;
pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
