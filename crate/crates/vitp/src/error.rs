use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Variants group into three families that map onto the CLI exit codes:
/// usage/config problems (exit 1), data and file-format problems (exit 2),
/// and numeric failures (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing gradient for parameter '{name}'")]
    MissingGrad { name: String },

    #[error("empty proposal: mask has no support")]
    EmptyProposal,

    #[error("degenerate proposal row {row}: all real-class scores are zero")]
    DegenerateRow { row: usize },

    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("NaN loss at step {step}")]
    NanLoss { step: usize },

    #[error("gradient check failed: max relative error {max_rel_err:.3e}")]
    GradCheckFailed { max_rel_err: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::Config(_)
            | Error::LabelOutOfRange { .. }
            | Error::MissingGrad { .. } => 1,
            Error::ShapeMismatch { .. }
            | Error::EmptyProposal
            | Error::DegenerateRow { .. }
            | Error::Format { .. }
            | Error::Io(_) => 2,
            Error::NonFinite { .. } | Error::NanLoss { .. } | Error::GradCheckFailed { .. } => 3,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
