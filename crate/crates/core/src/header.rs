//! Fixed 24-byte message preamble used for latency and loss accounting.
//!
//! Layout (all integers big-endian):
//!
//! | bytes   | field           |
//! |---------|-----------------|
//! | 0..4    | magic `MQBN`    |
//! | 4..8    | version / flags |
//! | 8..16   | sequence number |
//! | 16..24  | send time (ns)  |

use bytes::{BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 24;
pub const MAGIC: [u8; 4] = *b"MQBN";
/// Version 1, no flags.
pub const DEFAULT_VERSION_FLAGS: u32 = 0x0100_0000;
pub const FILLER_BYTE: u8 = 0xAB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessageHeader {
    pub version_flags: u32,
    pub seq: u64,
    pub send_ts_ns: u64,
}

impl MessageHeader {
    pub fn new(seq: u64, send_ts_ns: u64) -> Self {
        Self {
            version_flags: DEFAULT_VERSION_FLAGS,
            seq,
            send_ts_ns,
        }
    }

    pub fn version(&self) -> u8 {
        (self.version_flags >> 24) as u8
    }

    pub fn flags(&self) -> u32 {
        self.version_flags & 0x00FF_FFFF
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        encode_header(self.seq, self.send_ts_ns, self.version_flags)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeaderError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("payload of {requested} bytes cannot hold the {HEADER_LEN}-byte header")]
    PayloadTooSmall { requested: usize },
}

pub fn encode_header(seq: u64, send_ts_ns: u64, version_flags: u32) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..8].copy_from_slice(&version_flags.to_be_bytes());
    out[8..16].copy_from_slice(&seq.to_be_bytes());
    out[16..24].copy_from_slice(&send_ts_ns.to_be_bytes());
    out
}

/// Parses the first 24 bytes; anything after the header is padding and ignored.
pub fn decode_header(bytes: &[u8]) -> Result<MessageHeader, HeaderError> {
    if bytes.len() < HEADER_LEN {
        return Err(HeaderError::MalformedHeader("shorter than 24 bytes"));
    }
    if bytes[0..4] != MAGIC {
        return Err(HeaderError::MalformedHeader("magic mismatch"));
    }
    let word = |range: std::ops::Range<usize>| -> [u8; 8] { bytes[range].try_into().unwrap() };
    Ok(MessageHeader {
        version_flags: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
        seq: u64::from_be_bytes(word(8..16)),
        send_ts_ns: u64::from_be_bytes(word(16..24)),
    })
}

/// Header followed by `0xAB` filler up to `total_bytes`.
pub fn build_payload(header: &MessageHeader, total_bytes: usize) -> Result<Bytes, HeaderError> {
    if total_bytes < HEADER_LEN {
        return Err(HeaderError::PayloadTooSmall {
            requested: total_bytes,
        });
    }
    let mut buf = BytesMut::with_capacity(total_bytes);
    buf.put_slice(&header.encode());
    buf.put_bytes(FILLER_BYTE, total_bytes - HEADER_LEN);
    Ok(buf.freeze())
}

/// Reusable payload template: only the first 24 bytes change per message.
#[derive(Debug, Clone)]
pub struct PayloadTemplate {
    buf: BytesMut,
}

impl PayloadTemplate {
    pub fn new(total_bytes: usize) -> Result<Self, HeaderError> {
        let zero = MessageHeader::new(0, 0);
        Ok(Self {
            buf: BytesMut::from(&build_payload(&zero, total_bytes)?[..]),
        })
    }

    pub fn stamp(&mut self, header: &MessageHeader) -> Bytes {
        self.buf[..HEADER_LEN].copy_from_slice(&header.encode());
        Bytes::copy_from_slice(&self.buf)
    }
}
