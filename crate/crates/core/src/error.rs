use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dataset format error: {0}")]
    DatasetFormat(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("capability error: provider `{provider}` does not support {capability}")]
    Capability { provider: String, capability: &'static str },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("bridge error: {0}")]
    Bridge(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI: 2 validation, 3 divergence, 4 bridge, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::Validation(_)
            | Error::DatasetFormat(_)
            | Error::Capability { .. }
            | Error::Json(_) => 2,
            Error::Numeric(_) | Error::Divergence(_) => 3,
            Error::Bridge(_) => 4,
            Error::Io(_) | Error::Image(_) => 5,
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
