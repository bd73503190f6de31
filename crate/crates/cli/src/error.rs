use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] bandex_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed{}: {message}", seed.map(|s| format!(" for seed {s}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        seed: Option<u64>,
        message: String,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, seed: Option<u64>, err: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage,
            seed,
            message: err.to_string(),
        }
    }
}
