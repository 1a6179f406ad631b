use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardTwice,
    #[error("step index {t} out of range (valid: {min}..={max})")]
    StepOutOfRange { t: usize, min: usize, max: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("missing file `{0}`")]
    MissingFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parseable category, used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::NonScalarLoss(_) => {
                "shape"
            }
            Error::BackwardTwice => "autodiff",
            Error::StepOutOfRange { .. } | Error::InvalidSchedule(_) => "schedule",
            Error::InvalidConfig(_) | Error::UnknownKey(_) | Error::UnknownAttribute(_) => "config",
            Error::UnknownLayer(_) => "layer",
            Error::EmptyDataset => "data",
            Error::Diverged { .. } => "diverged",
            Error::Corrupt(_) | Error::VersionMismatch { .. } => "format",
            Error::MissingFile(_) => "missing-file",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
