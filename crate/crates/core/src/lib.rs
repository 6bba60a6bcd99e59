pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod target;
pub mod trainer;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
