pub mod ann;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod enrichment;
pub mod error;
pub mod eval;
pub mod hash_embedding;
pub mod io;
pub mod loss;
pub mod math;
pub mod pipeline;
pub mod rng;
pub mod run;
pub mod serving;
pub mod tokenizer;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
