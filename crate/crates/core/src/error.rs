use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: bad token id, shape mismatch, empty mask.
    #[error("input error: {0}")]
    Input(String),

    /// KV cache or sequence capacity exhausted.
    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Peer violated the frame format or message choreography.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Byte stream ended or was cut mid-frame.
    #[error("framing error: {0}")]
    Framing(String),

    #[error("handshake error: {0}")]
    Handshake(String),

    #[error("transport error: {0}")]
    Transport(String),

    /// Broken internal invariant, e.g. a missing stash entry.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
