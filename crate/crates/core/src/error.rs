use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("degenerate quantization range [{lower}, {upper}]")]
    DegenerateRange { lower: f32, upper: f32 },
    #[error("non-positive weight bound {0}")]
    NonPositiveBound(f32),
    #[error("{0} requires a non-empty input")]
    Empty(&'static str),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite loss in {stage}: {value}")]
    NonFinite { stage: String, value: f64 },
    #[error("checkpoint field `{field}`: {msg}")]
    Checkpoint { field: &'static str, msg: String },
    #[error("checkpoint scope mismatch: file has {found}, config expects {expected}")]
    ScopeMismatch { found: String, expected: String },
    #[error("unsupported image format in {path}: {msg}")]
    UnsupportedImage { path: PathBuf, msg: String },
    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("missing bit decision for quantized forward")]
    MissingBitDecision,
    #[error("network has no quantization state")]
    NotQuantized,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::DegenerateRange { .. } => "degenerate_range",
            Error::NonPositiveBound(_) => "non_positive_bound",
            Error::Empty(_) => "empty_input",
            Error::EmptyTape => "empty_tape",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint { .. } => "checkpoint",
            Error::ScopeMismatch { .. } => "scope_mismatch",
            Error::UnsupportedImage { .. } => "unsupported_image",
            Error::Image { .. } => "image",
            Error::Config(_) => "config",
            Error::MissingBitDecision => "missing_bit_decision",
            Error::NotQuantized => "not_quantized",
            Error::Io(_) => "io",
        }
    }
}

/// I/O error annotated with the path involved.
pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
