//! Error type shared across the toolflow.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value is not finite: {0}")]
    NonFinite(f64),

    #[error("wordlength {0} outside supported range 2..=16")]
    InvalidWordlength(u8),

    #[error("code {code} out of range for wordlength {wordlength}")]
    CodeOutOfRange { code: i64, wordlength: u8 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layer {index} ({kind}) is not a CONV or FC layer")]
    NotMatrixLayer { index: usize, kind: String },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("missing weight blob: {0}")]
    MissingBlob(PathBuf),

    #[error("checksum mismatch for blob {0}")]
    ChecksumMismatch(PathBuf),

    #[error("quantisation scheme does not match network: {0}")]
    SchemeMismatch(String),

    #[error("invalid gBvSB parameters m={m}, n={n} for {classes} classes")]
    InvalidGbvsbParams { m: usize, n: usize, classes: usize },

    #[error("invalid tile configuration: {0}")]
    InvalidTileConfig(String),

    #[error("invalid platform model: {0}")]
    InvalidPlatform(String),

    #[error("no feasible design point: {constraint}")]
    NoFeasibleDesign { constraint: String },

    #[error("no wordlength within 2..=16 satisfies error tolerance {0}")]
    InfeasibleTolerance(f64),

    #[error(
        "no per-layer scheme survives threshold {threshold} for layer {layer}; \
         loosen the layer threshold"
    )]
    EmptySurvivorSet { layer: usize, threshold: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed data in {path}: {reason}")]
    MalformedData { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
