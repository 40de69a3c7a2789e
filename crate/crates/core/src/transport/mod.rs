//! Message framing, correlated request/response over a reliable byte stream,
//! and the two stream backends (TCP sockets and an in-memory network with
//! per-link round-trip delay).

mod channel;
mod frame;
mod mem;
mod profile;
mod server;
mod tcp;

use std::fmt;
use std::io::{self, Read, Write};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::clock::SharedClock;

pub use channel::{Channel, ChannelPool};
pub use frame::{
    decode_message, decode_message_with_limit, encode_message, encode_message_with_limit, read_frame, Message,
    MessageKind, DEFAULT_MAX_PAYLOAD, HEADER_LEN,
};
pub use mem::MemTransport;
pub use profile::{LinkProfile, ProfileParseError};
pub use server::{RequestContext, Server, Service};
pub use tcp::TcpTransport;

pub const DEFAULT_RPC_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("payload of {len} bytes exceeds maximum {max}")]
    Oversize { len: usize, max: usize },
    #[error("malformed frame: {0}")]
    Decode(String),
    #[error("connection to {0} refused")]
    Refused(NodeAddr),
    #[error("channel to {0} is closed")]
    Closed(NodeAddr),
    #[error("request {request_id} to {peer} timed out after {after:?}")]
    Timeout { peer: NodeAddr, request_id: u64, after: Duration },
    #[error("request id {0} already in flight on this channel")]
    DuplicateRequestId(u64),
    #[error("bad address `{0}`")]
    BadAddress(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// A node or client endpoint, `host:port` style. Access control compares the
/// host part only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeAddr(String);

impl NodeAddr {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn parse(s: &str) -> Result<Self, TransportError> {
        let s = s.trim();
        if s.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(TransportError::BadAddress(s.to_string()));
        }
        Ok(Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn host(&self) -> &str {
        match self.0.rsplit_once(':') {
            Some((h, port)) if !h.is_empty() && port.chars().all(|c| c.is_ascii_digit()) => h,
            _ => &self.0,
        }
    }
}

impl fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeAddr {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// The two halves of an established reliable byte stream plus a handle that
/// aborts it from any thread.
pub struct Duplex {
    pub reader: Box<dyn Read + Send>,
    pub writer: Box<dyn Write + Send>,
    pub closer: Arc<dyn Fn() + Send + Sync>,
}

pub trait Listener: Send {
    /// Block for the next inbound stream; returns the caller's address.
    fn accept(&mut self) -> Result<(Duplex, NodeAddr), TransportError>;
}

/// A pluggable reliable-stream backend.
pub trait Transport: Send + Sync {
    fn connect(&self, local: &NodeAddr, peer: &NodeAddr) -> Result<Duplex, TransportError>;
    fn bind(&self, addr: &NodeAddr) -> Result<Box<dyn Listener>, TransportError>;
    /// Stop accepting on `addr` and abort every stream touching it.
    fn shutdown(&self, addr: &NodeAddr);
    fn clock(&self) -> SharedClock;
    /// Count of streams ever established through this backend.
    fn connections_established(&self) -> usize;
}

pub type SharedTransport = Arc<dyn Transport>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_strips_numeric_port_only() {
        assert_eq!(NodeAddr::new("10.0.0.1:6000").host(), "10.0.0.1");
        assert_eq!(NodeAddr::new("chi1").host(), "chi1");
        assert_eq!(NodeAddr::new("weird:name").host(), "weird:name");
    }

    #[test]
    fn parse_rejects_blank() {
        assert!(NodeAddr::parse("  ").is_err());
        assert!(NodeAddr::parse("a b").is_err());
    }
}
