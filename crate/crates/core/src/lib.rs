pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
