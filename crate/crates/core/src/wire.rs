//! Wire format for handshake and data messages.
//!
//! Every message is a fixed 20-byte header, the payload, and a 16-byte MAC:
//!
//! ```text
//!  0        1        2                10               18       20          20+len
//! +--------+--------+----------------+----------------+--------+-----------+--------+
//! |version |  type  |   session id   |   sequence     |  len   |  payload  |  mac   |
//! +--------+--------+----------------+----------------+--------+-----------+--------+
//! ```
//!
//! All integers are big-endian.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

pub const PROTOCOL_VERSION: u8 = 1;
/// Fixed overhead of every encoded message: 20-byte header plus 16-byte MAC.
pub const OVERHEAD_LEN: usize = 36;
pub const PREFIX_LEN: usize = 20;
pub const MAC_LEN: usize = 16;
pub const COOKIE_LEN: usize = 32;
pub const NONCE_LEN: usize = 8;
pub const MAX_PAYLOAD_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageType {
    ClientHello = 0x01,
    HelloVerifyRequest = 0x02,
    ServerHello = 0x03,
    HandshakeAck = 0x04,
    ServerFinished = 0x05,
    AddressRedirect = 0x06,
    Data = 0x10,
    DataAck = 0x11,
}

impl MessageType {
    pub const ALL: [MessageType; 8] = [
        MessageType::ClientHello,
        MessageType::HelloVerifyRequest,
        MessageType::ServerHello,
        MessageType::HandshakeAck,
        MessageType::ServerFinished,
        MessageType::AddressRedirect,
        MessageType::Data,
        MessageType::DataAck,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    /// Messages that belong to the handshake rather than the data phase.
    pub fn is_handshake(self) -> bool {
        !matches!(self, MessageType::Data | MessageType::DataAck)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::ClientHello => "ClientHello",
            MessageType::HelloVerifyRequest => "HelloVerifyRequest",
            MessageType::ServerHello => "ServerHello",
            MessageType::HandshakeAck => "HandshakeAck",
            MessageType::ServerFinished => "ServerFinished",
            MessageType::AddressRedirect => "AddressRedirect",
            MessageType::Data => "Data",
            MessageType::DataAck => "DataAck",
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 8-byte session identifier; all-zero before a session exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SessionId(pub [u8; 8]);

impl SessionId {
    pub const ZERO: SessionId = SessionId([0; 8]);

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 8]
    }

    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.0)
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.as_u64())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub version: u8,
    pub msg_type: MessageType,
    pub session_id: SessionId,
    pub seq: u64,
    pub payload: Vec<u8>,
    pub mac: [u8; MAC_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the 65535-byte limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("buffer of {0} bytes is shorter than the 36-byte minimum")]
    ShortBuffer(usize),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownMessageType(u8),
    #[error("declared payload length {declared} does not match the {actual} bytes present")]
    LengthMismatch { declared: usize, actual: usize },
}

impl WireMessage {
    /// A message with no session, sequence zero and an all-zero MAC.
    pub fn new(msg_type: MessageType, payload: Vec<u8>) -> Self {
        WireMessage {
            version: PROTOCOL_VERSION,
            msg_type,
            session_id: SessionId::ZERO,
            seq: 0,
            payload,
            mac: [0; MAC_LEN],
        }
    }

    pub fn encoded_len(&self) -> usize {
        OVERHEAD_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        let len = self.payload.len();
        if len > MAX_PAYLOAD_LEN {
            return Err(EncodeError::PayloadTooLarge(len));
        }
        let mut out = Vec::with_capacity(OVERHEAD_LEN + len);
        out.push(self.version);
        out.push(self.msg_type.code());
        out.extend_from_slice(&self.session_id.0);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.mac);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < OVERHEAD_LEN {
            return Err(DecodeError::ShortBuffer(bytes.len()));
        }
        let version = bytes[0];
        if version != PROTOCOL_VERSION {
            return Err(DecodeError::UnknownVersion(version));
        }
        let msg_type =
            MessageType::from_code(bytes[1]).ok_or(DecodeError::UnknownMessageType(bytes[1]))?;
        let declared = u16::from_be_bytes([bytes[18], bytes[19]]) as usize;
        let actual = bytes.len() - OVERHEAD_LEN;
        if declared != actual {
            return Err(DecodeError::LengthMismatch { declared, actual });
        }
        let mut session_id = [0u8; 8];
        session_id.copy_from_slice(&bytes[2..10]);
        let mut seq = [0u8; 8];
        seq.copy_from_slice(&bytes[10..18]);
        let mut mac = [0u8; MAC_LEN];
        mac.copy_from_slice(&bytes[PREFIX_LEN + declared..]);
        Ok(WireMessage {
            version,
            msg_type,
            session_id: SessionId(session_id),
            seq: u64::from_be_bytes(seq),
            payload: bytes[PREFIX_LEN..PREFIX_LEN + declared].to_vec(),
            mac,
        })
    }
}

/// One-line trace rendering: type, session id, sequence and payload length.
impl fmt::Display for WireMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} sid={} seq={} len={}",
            self.msg_type,
            self.session_id,
            self.seq,
            self.payload.len()
        )
    }
}

/// Renders raw datagram bytes for traces, falling back to a length note.
pub fn describe(bytes: &[u8]) -> String {
    match WireMessage::decode(bytes) {
        Ok(msg) => msg.to_string(),
        Err(_) => format!("<undecodable {} bytes>", bytes.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("expected a {expected}-byte payload, got {actual}")]
    WrongLength { expected: usize, actual: usize },
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<(), PayloadError> {
    if bytes.len() == expected {
        Ok(())
    } else {
        Err(PayloadError::WrongLength {
            expected,
            actual: bytes.len(),
        })
    }
}

/// Cookie plus the server nonce it was minted with. Carried by
/// HelloVerifyRequest and by the cookie-bearing ClientHello.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CookiePayload {
    pub cookie: [u8; COOKIE_LEN],
    pub nonce: [u8; NONCE_LEN],
}

impl CookiePayload {
    pub const LEN: usize = COOKIE_LEN + NONCE_LEN;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.cookie);
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        expect_len(bytes, Self::LEN)?;
        let mut cookie = [0u8; COOKIE_LEN];
        let mut nonce = [0u8; NONCE_LEN];
        cookie.copy_from_slice(&bytes[..COOKIE_LEN]);
        nonce.copy_from_slice(&bytes[COOKIE_LEN..]);
        Ok(CookiePayload { cookie, nonce })
    }
}

/// The address a TCS client must use after the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedirectPayload {
    pub addr: SocketAddrV4,
}

impl RedirectPayload {
    pub const LEN: usize = 6;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.addr.ip().octets());
        out.extend_from_slice(&self.addr.port().to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        expect_len(bytes, Self::LEN)?;
        let ip = Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]);
        let port = u16::from_be_bytes([bytes[4], bytes[5]]);
        Ok(RedirectPayload {
            addr: SocketAddrV4::new(ip, port),
        })
    }
}

/// Application data: an 8-byte message id followed by filler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPayload {
    pub message_id: u64,
    pub body: Vec<u8>,
}

impl DataPayload {
    pub const MIN_LEN: usize = 8;

    /// `total_len` bytes of patterned data tagged with `message_id`.
    pub fn patterned(message_id: u64, total_len: usize) -> Self {
        let body_len = total_len.saturating_sub(Self::MIN_LEN);
        let body = (0..body_len)
            .map(|i| (message_id as u8).wrapping_add(i as u8))
            .collect();
        DataPayload { message_id, body }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::MIN_LEN + self.body.len());
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        if bytes.len() < Self::MIN_LEN {
            return Err(PayloadError::WrongLength {
                expected: Self::MIN_LEN,
                actual: bytes.len(),
            });
        }
        let mut id = [0u8; 8];
        id.copy_from_slice(&bytes[..8]);
        Ok(DataPayload {
            message_id: u64::from_be_bytes(id),
            body: bytes[8..].to_vec(),
        })
    }
}

/// Echo of the acknowledged Data sequence number and its application id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckPayload {
    pub acked_seq: u64,
    pub message_id: u64,
}

impl AckPayload {
    pub const LEN: usize = 16;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(&self.acked_seq.to_be_bytes());
        out.extend_from_slice(&self.message_id.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        expect_len(bytes, Self::LEN)?;
        let mut seq = [0u8; 8];
        let mut id = [0u8; 8];
        seq.copy_from_slice(&bytes[..8]);
        id.copy_from_slice(&bytes[8..]);
        Ok(AckPayload {
            acked_seq: u64::from_be_bytes(seq),
            message_id: u64::from_be_bytes(id),
        })
    }
}
