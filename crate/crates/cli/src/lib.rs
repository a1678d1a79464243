//! Library side of the `ensemble` command: configuration, pipelines, output
//! files and verification.

pub mod app;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod verify;

pub use app::run;
pub use config::RunConfig;
pub use error::CliError;
