use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps these onto process exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at index {index}: {value}")]
    NonFiniteLoss { index: usize, value: f64 },

    #[error("numerical failure in {context}: {detail}")]
    NumericalFailure { context: &'static str, detail: String },

    #[error("degenerate geometry at iteration {iteration}: weighted Fisher matrix is zero but the gradient is not")]
    DegenerateGeometry { iteration: usize },

    #[error("dimension too large: {0}")]
    DimensionTooLarge(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("environment digest mismatch: file has {found}, environment is {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for this error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EmptyInput(_) => "empty-input",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::DegenerateGeometry { .. } => "degenerate-geometry",
            Error::DimensionTooLarge(_) => "dimension-too-large",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::DigestMismatch { .. } => "digest-mismatch",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code used by the CLI: 2 for config/parse problems, 3 for
    /// digest mismatches, 4 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::DigestMismatch { .. } => 3,
            Error::NumericalFailure { .. } | Error::DegenerateGeometry { .. } => 4,
            _ => 1,
        }
    }
}
