pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod graph;
pub mod jsonl;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod qagen;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
