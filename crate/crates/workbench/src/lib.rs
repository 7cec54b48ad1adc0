//! Experiment workbench around the scratch-ticket core: dataset ingestion
//! (IDX and CIFAR binary, gzip transparent), declarative TOML run configs,
//! checkpoint and candidate-set files, CSV/JSON reports, static SVG plots,
//! and the `rst` command-line tool.

pub mod candidates;
pub mod ckpt_io;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod runner;
pub mod svg;

pub use config::RunConfig;
pub use error::{Result, WorkbenchError};
pub use runner::{run, Overrides, RunSummary, Stage};
