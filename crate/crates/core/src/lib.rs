pub mod circuit;
pub mod converters;
pub mod error;
pub mod mapping;
pub mod nn;
pub mod rng;
pub mod update;

pub use error::{Error, Result};
