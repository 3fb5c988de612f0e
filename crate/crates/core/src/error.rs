use std::path::PathBuf;

/// Errors raised by the pipeline.
///
/// Variants are grouped by failure class so the command-line front end can
/// map each class onto a distinct exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes exposed as process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Validation,
    Io,
    Convergence,
}

impl FailureClass {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureClass::Validation => 2,
            FailureClass::Io => 3,
            FailureClass::Convergence => 4,
        }
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> FailureClass {
        match self {
            Error::Invalid(_) | Error::Shape(_) | Error::Format { .. } => FailureClass::Validation,
            Error::Io { .. } => FailureClass::Io,
            Error::Convergence(_) | Error::NonFinite(_) => FailureClass::Convergence,
            Error::Stage { source, .. } => source.class(),
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
