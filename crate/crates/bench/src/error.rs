use std::path::PathBuf;

use tak_core::TakError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unsupported schema_version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TakError,
    },

    #[error("artifact {path} failed verification: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("{0}")]
    Core(#[from] TakError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for tak_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| BenchError::Stage { stage, source })
    }
}
