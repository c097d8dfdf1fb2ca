use thiserror::Error;

/// Errors produced anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("coarsening stagnated: coarse level has {coarse} points, fine has {fine}")]
    CoarseningStagnation { coarse: usize, fine: usize },

    #[error("solver: {0}")]
    Solver(String),

    #[error("model selection: {0}")]
    ModelSelection(String),

    #[error("partition: {0}")]
    Partition(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("cache file: {0}")]
    CacheFormat(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
