//! Error types shared across the runtime.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the runtime. Each variant carries enough context to
/// identify the failing peer or input without a debugger.
#[derive(Debug, Clone)]
pub enum Error {
    /// Bootstrap or init failure (bad env, unreachable rendezvous, timeout).
    Startup(String),
    /// A job layout violated its invariants.
    InvalidLayout(String),
    /// Socket-level failure on a channel. `peer` is the world rank at the
    /// other end when known.
    Transport { peer: Option<usize>, detail: String },
    /// Malformed bytes on the wire; the channel to `peer` is poisoned.
    Protocol { peer: usize, detail: String },
    /// An incoming message was longer than the posted buffer.
    Truncation { needed: usize, capacity: usize },
    /// The caller broke an API precondition (bad rank, freed request, ...).
    Usage(String),
}

impl Error {
    pub(crate) fn transport(peer: usize, err: &io::Error) -> Error {
        Error::Transport { peer: Some(peer), detail: err.to_string() }
    }

    /// World rank of the peer involved in a transport or protocol error.
    pub fn peer(&self) -> Option<usize> {
        match self {
            Error::Transport { peer, .. } => *peer,
            Error::Protocol { peer, .. } => Some(*peer),
            _ => None,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Startup(d) => write!(f, "startup error: {d}"),
            Error::InvalidLayout(d) => write!(f, "invalid job layout: {d}"),
            Error::Transport { peer: Some(p), detail } => {
                write!(f, "transport error (peer rank {p}): {detail}")
            }
            Error::Transport { peer: None, detail } => write!(f, "transport error: {detail}"),
            Error::Protocol { peer, detail } => {
                write!(f, "protocol error (peer rank {peer}): {detail}")
            }
            Error::Truncation { needed, capacity } => {
                write!(f, "message truncated: {needed} bytes arrived for a {capacity}-byte buffer")
            }
            Error::Usage(d) => write!(f, "usage error: {d}"),
        }
    }
}

impl std::error::Error for Error {}
