use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Invariant violations raised while constructing domain values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("{0}")]
    Invalid(String),
    #[error("box field {field} = {value} out of [0,1]")]
    BoxField { field: &'static str, value: f64 },
    #[error("score {0} out of [0,1]")]
    Score(f64),
    #[error("malformed template: expected exactly one {{tags}} placeholder, found {0}")]
    MalformedTemplate(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field} out of {bound}")]
    OutOfRange {
        field: &'static str,
        bound: &'static str,
    },
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("invalid config document: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("fixture miss: {0}")]
    FixtureMiss(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("model failure (HTTP {status}): {message}")]
    Model { status: u16, message: String },
    #[error("request rejected (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("image decode failure for {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no categories found under {0}")]
    NoCategories(PathBuf),
    #[error("missing ground-truth mask for {image}: expected {expected}")]
    MissingMask { image: PathBuf, expected: PathBuf },
    #[error("duplicate image id {0}")]
    DuplicateId(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("image decode failure for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("not an IAPS file")]
    BadMagic,
    #[error("unsupported IAPS version {0}")]
    BadVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension overflow: {width}x{height}")]
    DimensionOverflow { width: u32, height: u32 },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("undefined: no positive pixels")]
    NoPositives,
    #[error("dimension mismatch: score map {score:?} vs ground truth {truth:?}")]
    DimensionMismatch {
        score: (u32, u32),
        truth: (u32, u32),
    },
    #[error("no category reports to aggregate")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: mask {mask:?} vs map {map:?}")]
    DimensionMismatch { mask: (u32, u32), map: (u32, u32) },
    #[error(transparent)]
    Type(#[from] TypeError),
}

/// Errors from the pipeline, prefixed by the stage that raised them.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("{stage}: {source}")]
    Geometry {
        stage: &'static str,
        #[source]
        source: GeometryError,
    },
    #[error("{stage}: {source}")]
    Dataset {
        stage: &'static str,
        #[source]
        source: DatasetError,
    },
    #[error("{stage}: {source}")]
    Metrics {
        stage: &'static str,
        #[source]
        source: MetricsError,
    },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Type(#[from] TypeError),
    #[error("empty split {0:?} in manifest")]
    EmptySplit(crate::types::Split),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}
