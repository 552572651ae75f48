//! Command-line harness for the latent-condensed attention engine: resolves
//! a run configuration from defaults, a TOML file, and flag overrides, then
//! executes one mode and streams JSONL report records.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{Mode, RunConfig};
pub use report::{matrix_digest, report_path, slice_digest, write_jsonl, ReportRecord};
pub use runner::{run, RunOutcome};
