//! Workbench error type; every failure carries enough context to name the
//! run stage and offending file.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, WorkbenchError>;

#[derive(Debug, thiserror::Error)]
pub enum WorkbenchError {
    #[error("{stage}: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: rst_core::Error,
    },

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {what} at byte {offset}", .path.display())]
    BadFormat {
        path: PathBuf,
        what: String,
        offset: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset {0:?} is not a known dataset name")]
    UnknownDataset(String),

    #[error("plot input: {0}")]
    PlotSchema(String),
}

impl WorkbenchError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WorkbenchError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn core(stage: &'static str) -> impl FnOnce(rst_core::Error) -> Self {
        move |source| WorkbenchError::Core { stage, source }
    }
}
