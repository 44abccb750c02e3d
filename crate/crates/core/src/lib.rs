pub mod aggregate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod geo;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod seqmatch;
pub mod train;

pub use error::{Error, Result};
