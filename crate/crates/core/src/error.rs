use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error("observation {obs} out of range (table has {rows} rows)")]
    ObservationOutOfRange { obs: usize, rows: usize },
    #[error("token {token} out of range (vocabulary has {vocab} tokens)")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("prefix of length {len} exceeds response cap {cap}")]
    PrefixTooLong { len: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature dimension mismatch: model has {expected}, features have {actual}")]
    FeatureDim { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing field: {0}")]
    MissingField(&'static str),
    #[error("accounting violation: {0}")]
    Accounting(String),
    #[error("sub-runs failed: {0}")]
    SubRun(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownTask(_) => "unknown_task",
            Error::ObservationOutOfRange { .. } => "observation_out_of_range",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::PrefixTooLong { .. } => "prefix_too_long",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::FeatureDim { .. } => "feature_dim",
            Error::Empty(_) => "empty_input",
            Error::LengthMismatch(_) => "length_mismatch",
            Error::InvalidStrategy(_) => "invalid_strategy",
            Error::Config(_) => "invalid_config",
            Error::MissingField(_) => "missing_field",
            Error::Accounting(_) => "accounting",
            Error::SubRun(_) => "sub_run_failed",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
