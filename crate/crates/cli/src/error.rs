use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("stage `{stage}` needs `{needs}` first: missing {missing}")]
    Dependency {
        stage: &'static str,
        needs: &'static str,
        missing: PathBuf,
    },

    #[error("stage `{stage}` is stale: {reason}; rerun `{needs}`")]
    Stale {
        stage: &'static str,
        needs: &'static str,
        reason: String,
    },

    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },

    #[error(transparent)]
    Core(#[from] mine_core::Error),

    #[error(transparent)]
    Stats(#[from] mine_stats::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
