pub mod config;
pub mod corpus;
mod error;
pub mod eval;
pub mod hetgraph;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
