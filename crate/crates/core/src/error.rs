use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("timestamps decrease at line {line} ({ts} after {prev})")]
    Ordering { line: usize, prev: f64, ts: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("update error: {0}")]
    Update(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("no gradient reached parameters: {0:?}")]
    MissingGradient(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Ordering { .. } => "ordering",
            Error::Schema(_) => "schema",
            Error::Split(_) => "split",
            Error::Sampling(_) => "sampling",
            Error::Generation(_) => "generation",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Shape(_) => "shape",
            Error::Update(_) => "update",
            Error::Batch(_) => "batch",
            Error::Metric(_) => "metric",
            Error::Training { .. } => "training",
            Error::MissingGradient(_) => "missing_gradient",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
