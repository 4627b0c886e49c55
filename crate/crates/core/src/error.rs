use thiserror::Error;

/// Process exit codes used by the `diffattn` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const CORRUPT: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("context length exceeded: {needed} tokens > max_seq_len {max}")]
    ContextLength { needed: usize, max: usize },
    #[error("generation truncated after {generated} new tokens: context limit {max} reached")]
    Truncated { generated: usize, max: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => exit::CONFIG,
            Error::NonFinite(_) => exit::NUMERIC,
            Error::Corrupt(_) => exit::CORRUPT,
            _ => exit::FAILURE,
        }
    }
}
