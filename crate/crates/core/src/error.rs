use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error in {layer}, filter {filter}: {message}")]
    Numeric { layer: String, filter: usize, message: String },

    #[error("{0}")]
    Diverged(DivergenceReport),

    #[error("i/o error on {path} at offset {offset}: {source}")]
    Io {
        path: PathBuf,
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle error: {0}")]
    Oracle(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            offset: 0,
            source,
        }
    }

    /// Attaches a layer name to numeric errors raised by layer-agnostic ops.
    pub fn in_layer(self, name: &str) -> Self {
        match self {
            Error::Numeric { filter, message, .. } => Error::Numeric {
                layer: name.to_string(),
                filter,
                message,
            },
            other => other,
        }
    }
}

/// Where and when a run produced a non-finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub step: usize,
    pub location: String,
    pub detail: String,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "diverged at step {} in {}: {}", self.step, self.location, self.detail)
    }
}
