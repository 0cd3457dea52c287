use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("bad magic in {path} at byte offset {offset}: found {found:?}")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("invalid header in {path} at byte offset {offset}: {reason}")]
    BadHeader {
        path: PathBuf,
        offset: usize,
        reason: String,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {found}")]
    PayloadMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite feature value in {path} at byte offset {offset}")]
    NonFinite { path: PathBuf, offset: usize },

    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown class names: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),

    #[error("missing dense annotations for videos: {}", .0.join(", "))]
    MissingAnnotations(Vec<String>),

    #[error("videos with empty weak label: {}", .0.join(", "))]
    EmptyWeakLabel(Vec<String>),

    #[error("overlapping {class} segments in input: [{a_on},{a_off}) and [{b_on},{b_off})")]
    OverlappingSegments {
        class: usize,
        a_on: usize,
        a_off: usize,
        b_on: usize,
        b_off: usize,
    },

    #[error("training diverged: non-finite value in {path}")]
    Diverged { path: String },

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e} at {location}")]
    GradCheckFailed {
        max_rel_error: f64,
        tolerance: f64,
        location: String,
    },

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    OutputExists(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Stable machine-readable name for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape { .. } => "shape",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::BadHeader { .. } => "bad_header",
            Error::Truncated { .. } => "truncated",
            Error::PayloadMismatch { .. } => "payload_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::UnknownClasses(_) => "unknown_classes",
            Error::MissingAnnotations(_) => "missing_annotations",
            Error::EmptyWeakLabel(_) => "empty_weak_label",
            Error::OverlappingSegments { .. } => "overlapping_segments",
            Error::Diverged { .. } => "diverged",
            Error::NonDeterministic { .. } => "non_deterministic",
            Error::GradCheckFailed { .. } => "gradcheck_failed",
            Error::OutputExists(_) => "output_exists",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Csv { .. } => "csv",
            Error::Io { .. } => "io",
        }
    }
}
