pub mod cli;
pub mod cropper;
pub mod evaluator;
pub mod explainer;
pub mod error;
pub mod nncore;
pub mod pipeline;
pub mod models;
pub mod sampler;
pub mod spatialattn;
pub mod synthgen;
pub mod trainer;
pub mod trackdata;

pub use error::{Error, ErrorCategory, Result};
