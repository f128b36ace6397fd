use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unsupported SH degree {0} (hardcoded up to 3)")]
    UnsupportedDegree(usize),

    #[error("point {0:?} outside scene bounds [-1,1]^3")]
    OutOfBounds([f64; 3]),

    #[error("local coordinate {0:?} outside the unit cell")]
    OutOfCell([f64; 3]),

    #[error("index {index} out of range for extent {extent}")]
    Range { index: usize, extent: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0} regularizer does not apply to {1} students")]
    NotApplicable(&'static str, &'static str),

    #[error("non-finite value in segment `{segment}` ({context})")]
    NonFinite { segment: String, context: String },

    #[error("missing loss part `{0}` for stage {1}")]
    MissingLossPart(&'static str, u8),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (field `{field}`): {msg}")]
    Parse {
        path: PathBuf,
        field: String,
        msg: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 numerical, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
