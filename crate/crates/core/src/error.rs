use thiserror::Error;

/// Errors raised across the library. Time indices `k` and feature indices `j`
/// are 1-based, matching the usual notation `y_k`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("series `{id}`: timestamps not strictly increasing at k={k}")]
    NonIncreasingTimestamps { id: String, k: usize },
    #[error("series `{id}`: observation dimension differs from the rest of the dataset")]
    DimensionMismatch { id: String },
    #[error("series `{id}`: non-finite value at k={k}, j={j}")]
    NonFiniteValue { id: String, k: usize, j: usize },
    #[error("series `{id}`: fewer than two samples")]
    TooShort { id: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("innovation covariance not positive definite at k={k}")]
    SingularInnovation { k: usize },
    #[error("non-finite filter state at k={k}")]
    NonFiniteState { k: usize },
    #[error("predicted covariance not positive definite at k={k}")]
    SingularPrediction { k: usize },
    #[error("normal equations for `{block}` are singular")]
    SingularNormalEquations { block: &'static str },
    #[error("series {series}, cluster {cluster}: {source}")]
    InCluster {
        series: usize,
        cluster: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("series `{id}`: every single-model initialization failed")]
    SeriesInitFailed { id: String },
    #[error("{points} points cannot fill {clusters} clusters")]
    FewerPointsThanClusters { points: usize, clusters: usize },
    #[error("label {label} outside 0..{clusters}")]
    LabelOutOfRange { label: usize, clusters: usize },
    #[error("series `{id}`: non-positive value at k={k} cannot be log-transformed")]
    NonPositiveForLog { id: String, k: usize },
    #[error("series `{id}`: duplicate timestamp {t}")]
    DuplicateTimestamp { id: String, t: f64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
