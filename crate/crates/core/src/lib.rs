pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod params;
pub mod text_encoder;
pub mod trainer;

pub use error::{Result, SetnError};
