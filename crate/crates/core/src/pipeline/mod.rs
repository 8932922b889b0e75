//! File formats, run configuration and the batch pipeline.
//!
//! Exit status used by the command-line front end: 0 when every device was
//! fitted, 1 when some or all devices failed but the run completed, 2 when
//! the configuration or an input could not be read at all.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod config;
pub mod format;
pub mod io;
pub mod run;

pub use config::RunConfig;
pub use io::ParseIssue;
pub use run::{analyze, run_pipeline, write_outputs, RunOutput, RunStatus};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", render_issues(.0))]
    Parse(Vec<ParseIssue>),
    #[error("configuration: {0}")]
    Config(String),
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),
}

fn render_issues(issues: &[ParseIssue]) -> String {
    match issues {
        [] => "unparseable input".into(),
        [one] => one.to_string(),
        [first, rest @ ..] => format!("{first} (and {} more)", rest.len()),
    }
}

impl PipelineError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        2
    }
}
