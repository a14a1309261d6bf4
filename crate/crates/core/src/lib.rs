pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kg;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{CoreError, Result};
