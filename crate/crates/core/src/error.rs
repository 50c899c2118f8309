use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("cache miss for dialogue `{0}`")]
    CacheMiss(String),

    #[error("stale cache entry for dialogue `{id}`: stored hash {stored}, current {current}")]
    Stale {
        id: String,
        stored: String,
        current: String,
    },

    #[error("non-finite gradient at update {update} (dialogue `{dialogue_id}`): {detail}")]
    NonFinite {
        update: usize,
        dialogue_id: String,
        detail: String,
    },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },

    #[error("response failed schema validation: {reason}; offending text: {text}")]
    Validation { reason: String, text: String },

    #[error("{failed} of {total} jobs failed; completed results were written")]
    PartialFailure { failed: usize, total: usize },

    #[error("claim extraction failed: {0}")]
    Extraction(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/configuration, 2 data integrity, 3 transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Unsupported(_) => 1,
            Error::Parse { .. }
            | Error::Integrity(_)
            | Error::CacheMiss(_)
            | Error::Stale { .. }
            | Error::NonFinite { .. }
            | Error::Io { .. } => 2,
            Error::Transport { .. }
            | Error::Request { .. }
            | Error::Validation { .. }
            | Error::PartialFailure { .. }
            | Error::Extraction(_) => 3,
        }
    }
}
