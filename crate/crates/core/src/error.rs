use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or grid extent does not match what an operation needs.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("config error: {0}")]
    Config(String),

    /// A sparse active set, mask, or pyramid disagrees with its partner.
    #[error("consistency error in {op}: {detail}")]
    Consistency { op: &'static str, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training error at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn consistency(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Consistency {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with the training step at which it surfaced.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Training { .. } => e,
            other => Error::Training {
                step,
                source: Box::new(other),
            },
        }
    }

    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Training { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
