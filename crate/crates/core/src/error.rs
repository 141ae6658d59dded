use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("{0}")]
    Domain(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file could not be parsed.
    #[error("malformed {kind}: {message}")]
    Format { kind: &'static str, message: String },

    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: u64 },

    /// The proxy field produced too few surface hits to seed a scene.
    #[error("degenerate proxy: {0}")]
    Degenerate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn format_err(kind: &'static str, message: impl Into<String>) -> Error {
    Error::Format { kind, message: message.into() }
}
