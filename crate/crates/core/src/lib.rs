pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
