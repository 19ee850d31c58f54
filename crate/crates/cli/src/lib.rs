//! Library surface of the `hids` command-line tool, split out so the stages
//! and reports can be driven directly from integration tests.

pub mod bench;
pub mod config;
pub mod error;
pub mod stages;

pub use bench::{cmd_bench, BenchReport, BenchTiming};
pub use config::PipelineConfig;
pub use error::CliError;
pub use stages::Paths;
