//! Control-message framing.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! +------+----------------+-------------+-----------------+
//! | kind | request_id u64 | length u32  | payload[length] |
//! | u8   |                |             |                 |
//! +------+----------------+-------------+-----------------+
//! ```

use std::io::{self, Read};

use super::TransportError;

pub const HEADER_LEN: usize = 13;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

macro_rules! message_kinds {
    ($($name:ident = $val:expr),* $(,)?) => {
        /// Tag byte of a control message.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        #[repr(u8)]
        pub enum MessageKind {
            $($name = $val),*
        }

        impl MessageKind {
            pub const ALL: &'static [MessageKind] = &[$(MessageKind::$name),*];
        }

        impl TryFrom<u8> for MessageKind {
            type Error = TransportError;

            fn try_from(v: u8) -> Result<Self, TransportError> {
                match v {
                    $($val => Ok(MessageKind::$name),)*
                    other => Err(TransportError::Decode(format!("unknown message kind {other}"))),
                }
            }
        }
    };
}

message_kinds! {
    Ping = 0,
    Pong = 1,
    Lookup = 2,
    Locate = 3,
    Register = 4,
    Holds = 5,
    StoreChunk = 6,
    StoreCommit = 7,
    ReadBytes = 8,
    ReadRecords = 9,
    Replicate = 10,
    SpeStart = 11,
    SpeSegment = 12,
    SpeRelease = 13,
    ShuffleAppend = 14,
    SealOutput = 15,
    Members = 16,
    Progress = 17,
    Reply = 18,
    Error = 19,
}

impl MessageKind {
    /// Whether a frame of this kind ends an exchange (as opposed to an
    /// intermediate progress report).
    pub fn is_terminal_reply(self) -> bool {
        !matches!(self, MessageKind::Progress)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, request_id: u64, payload: Vec<u8>) -> Self {
        Self { kind, request_id, payload }
    }

    pub fn reply(payload: Vec<u8>) -> Self {
        Self::new(MessageKind::Reply, 0, payload)
    }
}

/// Encode with the default 64 MiB payload ceiling.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, TransportError> {
    encode_message_with_limit(msg, DEFAULT_MAX_PAYLOAD)
}

pub fn encode_message_with_limit(msg: &Message, max_payload: usize) -> Result<Vec<u8>, TransportError> {
    let len = msg.payload.len();
    if len > max_payload || len > u32::MAX as usize {
        return Err(TransportError::Oversize { len, max: max_payload });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.request_id.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    Ok(out)
}

/// Decode exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message, TransportError> {
    decode_message_with_limit(bytes, DEFAULT_MAX_PAYLOAD)
}

pub fn decode_message_with_limit(bytes: &[u8], max_payload: usize) -> Result<Message, TransportError> {
    if bytes.len() < HEADER_LEN {
        return Err(TransportError::Decode(format!("frame shorter than header: {} bytes", bytes.len())));
    }
    let (kind, request_id, len) = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    if len > max_payload {
        return Err(TransportError::Oversize { len, max: max_payload });
    }
    if bytes.len() != HEADER_LEN + len {
        return Err(TransportError::Decode(format!(
            "length field says {len} payload bytes, frame carries {}",
            bytes.len() - HEADER_LEN
        )));
    }
    Ok(Message { kind, request_id, payload: bytes[HEADER_LEN..].to_vec() })
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MessageKind, u64, usize), TransportError> {
    let kind = MessageKind::try_from(h[0])?;
    let request_id = u64::from_le_bytes(h[1..9].try_into().unwrap());
    let len = u32::from_le_bytes(h[9..13].try_into().unwrap()) as usize;
    Ok((kind, request_id, len))
}

/// Read one frame from a byte stream. `Ok(None)` on clean EOF at a frame
/// boundary.
pub fn read_frame<R: Read + ?Sized>(r: &mut R, max_payload: usize) -> Result<Option<Message>, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Io(io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, request_id, len) = parse_header(&header)?;
    if len > max_payload {
        return Err(TransportError::Oversize { len, max: max_payload });
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(Message { kind, request_id, payload }))
}
