use std::path::PathBuf;

/// Everything that can go wrong in the pipeline.
///
/// Variants map onto the process exit codes of the command-line front end:
/// usage and configuration problems exit with 1, missing artifacts with 2,
/// numeric failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("generation failed for `{param}`: {reason}")]
    Generation { param: &'static str, reason: String },
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("transfer error: {0}")]
    Transfer(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Missing(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
