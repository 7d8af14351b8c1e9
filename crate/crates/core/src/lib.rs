pub mod config;
pub mod corpus;
pub mod distant;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod threshold;

pub use error::{Error, Result};
