use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file structure: bad magic, missing property, unparsable header.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally valid file carrying invalid values (NaN, zero norm, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid parameters or configuration supplied by the caller.
    #[error("validation error: {0}")]
    Validation(String),

    /// The 2-byte index budget was exceeded.
    #[error("capacity error: {what} count {count} exceeds the 2-byte limit of {limit}")]
    Capacity {
        what: &'static str,
        count: usize,
        limit: usize,
    },

    #[error(
        "empty scene semantics: all {total} masks were filtered out by tau_noise={tau_noise}; \
         review the contribution/noise thresholds"
    )]
    EmptySemantics { total: usize, tau_noise: u32 },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 data/format, 4 capacity.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Validation(_) => 2,
            Error::Capacity { .. } => 4,
            _ => 3,
        }
    }
}
