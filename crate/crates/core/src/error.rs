use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // numerics
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("Jacobi eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),

    // dataset io
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),
    #[error("unsupported array header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("unsupported dtype {dtype:?} in {path} (only little-endian float32 is accepted)")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("non-finite payload value in {0}")]
    NonFinitePayload(PathBuf),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate clip id {0:?}")]
    DuplicateClipId(String),
    #[error("missing column {column:?} in {path}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("malformed csv {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("unknown source tag {0:?}")]
    UnknownSourceTag(String),
    #[error("clip {clip_id:?} has no embedding for source {tag:?}")]
    MissingEmbedding { clip_id: String, tag: String },
    #[error("invalid fold protocol: {0}")]
    InvalidFolds(String),

    // features
    #[error("empty input matrix")]
    EmptyInput,
    #[error("empty vector list")]
    EmptyList,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    // lda
    #[error("class {0} has fewer than two samples")]
    DegenerateClass(String),
    #[error("within-class scatter is rank deficient after regularization")]
    RankDeficient,
    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },

    // mlp
    #[error("batch-norm running statistics are unset; run a training step first")]
    UnfittedBatchNorm,
    #[error("model has not been fitted")]
    UnfittedModel,
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    // fusion / eval
    #[error("score kinds differ: {0}")]
    KindMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("expected {expected} reports, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("reports describe different systems: {0:?} vs {1:?}")]
    SystemMismatch(String, String),

    // configuration
    #[error("unknown classifier {0:?} (expected knn, gnb or mlp)")]
    UnknownClassifier(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Variant name, for machine-readable error lines.
    pub fn kind(&self) -> String {
        let debug = format!("{:?}", self);
        debug
            .split(|c: char| !c.is_ascii_alphanumeric())
            .next()
            .unwrap_or_default()
            .to_string()
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            UnknownClassifier(_) | Config(_) => ErrorClass::Usage,
            NonSymmetric { .. }
            | NoConvergence { .. }
            | NonFinite(_)
            | RankDeficient
            | NonFiniteLoss { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
