use std::fmt;
use std::path::PathBuf;

/// Pipeline stages, named after the modules that implement them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Weather,
    Pca,
    Tsne,
    KMeans,
    Evaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "dataset-ingest",
            Stage::Weather => "weather-add",
            Stage::Pca => "dimred-pca",
            Stage::Tsne => "tsne-embed",
            Stage::KMeans => "kmeans-cluster",
            Stage::Evaluate => "eval-merge",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("server: {0}")]
    Server(String),
    #[error(transparent)]
    Core(#[from] fcluster_core::Error),
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E> StageExt<T> for std::result::Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| AppError::Stage { stage, source: Box::new(e) })
    }
}

pub(crate) fn stage_error(stage: Stage, message: impl Into<String>) -> AppError {
    AppError::Stage { stage, source: message.into().into() }
}
