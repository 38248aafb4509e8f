use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("regression error: {0}")]
    Fit(String),

    #[error("solver error: {0}")]
    Solve(String),

    #[error("encoder backend error: {0}")]
    Backend(String),

    #[error("external encoder exited with {code:?}: {stderr}")]
    ProcessFailed { code: Option<i32>, stderr: String },

    #[error("external encoder timed out after {seconds}s")]
    ProcessTimeout { seconds: u64 },

    #[error("malformed stats file: {0}")]
    MalformedStats(String),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stable process exit code per error class, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::DimensionMismatch(_) => 2,
            Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 3,
            Error::Backend(_)
            | Error::ProcessFailed { .. }
            | Error::ProcessTimeout { .. }
            | Error::MalformedStats(_) => 4,
            Error::Fit(_) => 5,
            Error::Solve(_) => 6,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
