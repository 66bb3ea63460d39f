//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // tensor framing
    #[error("bad magic bytes {found:?}, expected \"SHRT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported tensor format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("tensor has {0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("tensor dims must be non-empty and every dim >= 1, got {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    // shapes and domain validation
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("probability {value} at flat index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },

    // manifests and tables
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("checksum mismatch for {path}: expected {expected}, computed {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("dangling scene id {scene_id:?} in {source_name}")]
    DanglingSceneId {
        scene_id: String,
        source_name: String,
    },
    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    // clustering
    #[error("{n} samples cannot support k = {k} clusters")]
    TooFewSamples { n: usize, k: usize },
    #[error("only {distinct} distinct points, cannot fit k = {k} clusters")]
    TooFewDistinctPoints { distinct: usize, k: usize },
    #[error("elbow scan needs at least 3 candidate k values, got {0}")]
    TooFewCandidates(usize),
    #[error("feature space mismatch: model is {model}, features are {features}")]
    SpaceMismatch { model: String, features: String },
    #[error("model format version {found} not supported (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },
    #[error("corrupted model payload: {0}")]
    CorruptedModel(String),

    // scoring / evaluation / fusion
    #[error("NCDD needs at least 2 centroids, got {0}")]
    TooFewCentroids(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("bin count {bins} exceeds sample count {n}")]
    TooManyBins { n: usize, bins: usize },
    #[error("labels contain a single class; both classes are required")]
    SingleClass,
    #[error("feature {feature:?} missing for scenes {scenes:?}")]
    MissingFeature {
        feature: String,
        scenes: Vec<String>,
    },
    #[error("only {usable} scenes have a value for {attribute:?}; need at least {required}")]
    TooFewScenes {
        attribute: String,
        usable: usize,
        required: usize,
    },
    #[error("only {0} groups have defined means; need at least 3")]
    TooFewGroups(usize),

    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing pipeline stage output: {0}")]
    MissingStage(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encoding failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::TooFewCandidates(_) => ErrorClass::Config,
            Error::Png(_) | Error::MissingStage(_) => ErrorClass::Internal,
            _ => ErrorClass::Data,
        }
    }
}
