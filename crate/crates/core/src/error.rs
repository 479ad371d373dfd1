use std::path::PathBuf;

/// Crate-wide error type. Variants map onto CLI exit codes: validation-class
/// errors exit 1, IO/format errors exit 2, numerics errors exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerics: {0}")]
    Numerics(String),

    #[error("validation: {0}")]
    Validation(String),

    #[error("format: {0}")]
    Format(String),

    #[error("degenerate normals: {0}")]
    DegenerateNormals(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics(_) => 3,
            Error::Io { .. } | Error::Format(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
