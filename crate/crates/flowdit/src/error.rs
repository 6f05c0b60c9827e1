use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] flowdit_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Wrong magic bytes or an unsupported format version.
    #[error("{0}")]
    Version(String),
    /// Structurally invalid file contents.
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 usage or configuration, 3 training
    /// divergence, 4 IO or corrupt files, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use flowdit_core::Error as C;
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Version(_) | Error::Format(_) => 4,
            Error::Core(c) => match c {
                C::Diverged { .. } => 3,
                C::ShapeMismatch { .. }
                | C::InvalidShape { .. }
                | C::InvalidAxis { .. }
                | C::IndexOutOfRange { .. }
                | C::InvalidPlane(_)
                | C::PlaneOutsideCube(_)
                | C::TooManyPlanes { .. }
                | C::Config(_)
                | C::TimestepOutOfRange { .. }
                | C::Parse(_) => 2,
                C::NonFiniteGradient(_) => 3,
                C::UndefinedMetric(_) => 1,
            },
        }
    }
}
