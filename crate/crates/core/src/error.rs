use std::io;
use std::path::PathBuf;

/// Errors raised anywhere in the keyword-spotting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("word not in lexicon: {0}")]
    NotInLexicon(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("clip {clip}: {msg}")]
    Validation { clip: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable tag for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::NotInLexicon(_) => "not-in-lexicon",
            Error::Capability(_) => "capability",
            Error::Format { .. } => "format",
            Error::Validation { .. } => "validation",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::Path { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
