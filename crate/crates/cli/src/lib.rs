//! Command-line driver for `fia-core`: TOML run configs, the edit command,
//! ablation grids with plain-text reports, image metrics and a determinism
//! self-test.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::CliError;
