use std::path::PathBuf;

/// Errors surfaced by the library. The CLI maps each variant family onto a
/// process exit code (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("config hash mismatch: stored {stored:016x}, recomputed {computed:016x}")]
    HashMismatch { stored: u64, computed: u64 },

    #[error("strategy mismatch: checkpoint holds `{found}`, requested `{expected}`")]
    StrategyMismatch { expected: String, found: String },

    #[error("task mismatch: expected `{expected}`, found `{found}`")]
    TaskMismatch { expected: String, found: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 = validation, 2 = I/O or file format, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Config { .. }
            | Error::Shape(_)
            | Error::StrategyMismatch { .. }
            | Error::TaskMismatch { .. } => 1,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::Version { .. }
            | Error::Corrupt { .. }
            | Error::HashMismatch { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
