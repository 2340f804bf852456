//! Pipeline orchestration and the `perceptscore` command line.

pub mod app;
pub mod error;
pub mod evaluator;
pub mod pipeline;

pub use error::{CliError, CliResult};
pub use pipeline::RunDir;
