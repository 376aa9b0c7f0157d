pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod probe;
pub mod signal;
pub mod synth;
pub mod tokenizer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::{Ablation, Pipeline, Representation, StageOptions};
