//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid answer space: need at least 2 choices, got {0}")]
    InvalidAnswerSpace(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label index {index} out of range for {n} choices")]
    LabelOutOfRange { index: usize, n: usize },

    #[error("insertion position {position} out of range 1..={max}")]
    PositionOutOfRange { position: usize, max: usize },

    /// Annotator output contained none of the known step delimiters.
    #[error("no known step delimiter found in annotated trace")]
    NoDelimiter { raw: String },

    /// Annotator output contained a delimiter-shaped token we do not know.
    #[error("unknown delimiter token <{0}>")]
    UnknownDelimiter(String),

    /// Annotator response did not match the requested structured format.
    /// Trials hitting this are skipped, not failed.
    #[error("annotator response format error: {0}")]
    AnnotatorFormat(String),

    /// Judge response did not match the requested structured format.
    #[error("judge response format error: {0}")]
    JudgeFormat(String),

    #[error("corrupt judge prompt requires corrupt metadata")]
    MissingCorruptMeta,

    #[error("request shape error: {0}")]
    RequestShape(String),

    #[error("transport error calling {model}: {message}")]
    Transport { model: String, message: String },

    #[error("retries exhausted calling {model} after {attempts} attempts: {message}")]
    RetryExhausted {
        model: String,
        attempts: u32,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("load error at {path}:{line}: {message}")]
    DataLoad {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::DataLoad {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Errors that mark a trial as degraded rather than aborting the run.
    pub fn is_per_trial(&self) -> bool {
        matches!(
            self,
            Error::AnnotatorFormat(_)
                | Error::JudgeFormat(_)
                | Error::Transport { .. }
                | Error::RetryExhausted { .. }
                | Error::NoDelimiter { .. }
                | Error::UnknownDelimiter(_)
        )
    }
}
