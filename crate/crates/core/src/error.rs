use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token {id} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("summary tags malformed at token {offset}: {reason}")]
    SummaryParse { offset: usize, reason: &'static str },

    #[error("structural error at turn {turn}: {reason}")]
    Structure { turn: usize, reason: String },

    #[error("turn out of order: expected index {expected}, got {got}")]
    Ordering { expected: usize, got: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient requested before any forward pass was recorded")]
    NoForwardPass,

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SummaryParse { .. } => "summary_parse",
            Error::Structure { .. } => "structure",
            Error::Ordering { .. } => "ordering",
            Error::NonFinite { .. } => "non_finite",
            Error::Numeric(_) => "numeric",
            Error::NoForwardPass => "state",
            Error::Capacity(_) => "capacity",
            Error::Precondition(_) => "precondition",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
