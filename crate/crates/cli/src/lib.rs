//! Command-line pipelines over the core library and the toy upsampler:
//! degradation synthesis, curation, the three training stages, sampler
//! construction, inference, attention benchmarks and a self-test.

pub mod commands;
pub mod config;
pub mod error;
pub mod schema;
pub mod selftest;

pub use config::PipelineConfig;
pub use error::CliError;
