use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate feature: vector has zero or non-finite norm")]
    DegenerateFeature,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("more clusters than points: k={k}, n={n}")]
    MoreClustersThanPoints { k: usize, n: usize },
    #[error("degenerate data: fewer than {k} distinct points")]
    TooFewDistinctPoints { k: usize },
    #[error("at least {min} clusters required, got {k}")]
    TooFewClusters { k: usize, min: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("degenerate centroids: clusters {0} and {1} coincide")]
    DegenerateCentroids(usize, usize),
    #[error("no valid K candidate")]
    NoValidCandidate,
    #[error("no negatives available: K must be at least 2")]
    NoNegatives,
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("below table range: 2*|C^s| = {0} < 8")]
    BelowTableRange(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("fully masked: ratio {ratio} masks all {cells} cells")]
    FullyMasked { ratio: f64, cells: usize },
    #[error("masked feature not ingested for row {row}")]
    MaskedFeatureMissing { row: u64 },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupted header: {0}")]
    CorruptedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("size mismatch: header implies {expected} bytes, file has {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("class-count mismatch: {0}")]
    ClassCountMismatch(String),
    #[error("misaligned sample ids: {0}")]
    MisalignedIds(String),
    #[error("invalid regime: {0}")]
    InvalidRegime(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
