use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("imbalance config error: {0}")]
    ImbalanceConfig(String),
    #[error("similarity undefined: {0}")]
    SimilarityUndefined(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("frame of {0} bytes exceeds the 64 MiB limit")]
    Oversize(usize),
    #[error("session error: {0}")]
    Session(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
