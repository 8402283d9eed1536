use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token {token} out of range for vocab of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("parse error in {what} at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("search space of {count} allocations exceeds the bound of {bound}")]
    SearchTooLarge { count: u128, bound: u128 },

    #[error("episode already finished")]
    EpisodeDone,

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            what,
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
