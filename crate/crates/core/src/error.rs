use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite matrix")]
    NonFinite,
    #[error("svd did not converge")]
    SvdNoConvergence,
    #[error("not positive definite")]
    NotPositiveDefinite,
    #[error("singular triangular factor")]
    SingularTriangular,
    #[error("calibration covariance degenerate")]
    CovarianceDegenerate,
    #[error("ratio too aggressive for K≥1 floor")]
    RatioTooAggressive,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {index} >= {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("mismatched K: {0} vs {1}")]
    MismatchedK(usize, usize),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("empty cache")]
    EmptyCache,
    #[error("unknown pattern {0}")]
    UnknownPattern(usize),
    #[error("unknown kind: {0}")]
    UnknownKind(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    Overlength { len: usize, max: usize },
    #[error("stale tape: {0}")]
    StaleTape(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite artifact from stage `{stage}`: {path}")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
