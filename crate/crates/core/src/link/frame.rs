//! Link frame codec shared by the gateway and the emulated nodes.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! magic "PG" | version | protocol | node_id_len | node_id | seq u16 | payload_len u16 | payload | crc u16
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE over every byte that precedes it.

use thiserror::Error;

use crate::protocol::ProtocolId;

pub const MAGIC: [u8; 2] = [0x50, 0x47];
pub const VERSION: u8 = 0x01;
pub const MAX_NODE_ID_LEN: usize = 32;
/// magic + version + protocol + node_id_len
const PREFIX_LEN: usize = 5;
/// seq + payload_len
const MID_LEN: usize = 4;
const CRC_LEN: usize = 2;
/// Frame size with a zero-length node id and payload.
pub const FRAME_OVERHEAD: usize = PREFIX_LEN + MID_LEN + CRC_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LinkFrame {
    pub protocol: ProtocolId,
    pub node_id: String,
    pub seq: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {len} bytes exceeds the {protocol} MTU of {mtu}")]
    PayloadTooLarge { protocol: ProtocolId, len: usize, mtu: usize },
    #[error("node id of {0} bytes exceeds the 32-byte limit")]
    NodeIdTooLong(usize),
    #[error("node id is empty")]
    EmptyNodeId,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("unknown protocol code {0:#04x}")]
    UnknownProtocol(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("crc mismatch: expected {expected:#06x}, computed {computed:#06x}")]
    CrcMismatch { expected: u16, computed: u16 },
    #[error("length fields inconsistent with frame")]
    LengthInconsistent,
    #[error("node id is not valid UTF-8")]
    NodeIdNotUtf8,
}

impl LinkFrame {
    pub fn new(protocol: ProtocolId, node_id: impl Into<String>, seq: u16, payload: impl Into<Vec<u8>>) -> Self {
        LinkFrame { protocol, node_id: node_id.into(), seq, payload: payload.into() }
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.node_id.is_empty() {
            return Err(FrameError::EmptyNodeId);
        }
        if self.node_id.len() > MAX_NODE_ID_LEN {
            return Err(FrameError::NodeIdTooLong(self.node_id.len()));
        }
        let mtu = self.protocol.mtu();
        if self.payload.len() > mtu {
            return Err(FrameError::PayloadTooLarge { protocol: self.protocol, len: self.payload.len(), mtu });
        }
        Ok(())
    }

    /// Number of bytes this frame occupies on the wire.
    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.node_id.len() + self.payload.len()
    }
}

const CRC_TABLE: [u16; 256] = build_crc_table();

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
pub fn crc16_ccitt_false(data: &[u8]) -> u16 {
    data.iter().fold(0xFFFF, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[(((crc >> 8) as u8) ^ b) as usize]
    })
}

pub fn encode_frame(frame: &LinkFrame) -> Result<Vec<u8>, FrameError> {
    frame.validate()?;
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.protocol.wire_code());
    out.push(frame.node_id.len() as u8);
    out.extend_from_slice(frame.node_id.as_bytes());
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc16_ccitt_false(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Inspects a frame prefix and returns the total frame length it announces,
/// `Ok(None)` when more bytes are needed to tell.
fn announced_len(buf: &[u8]) -> Result<Option<(ProtocolId, usize)>, FrameError> {
    // Check what we have so far so garbage is rejected as early as possible.
    if !buf.is_empty() && buf[0] != MAGIC[0] || buf.len() >= 2 && buf[1] != MAGIC[1] {
        return Err(FrameError::BadMagic);
    }
    if buf.len() >= 3 && buf[2] != VERSION {
        return Err(FrameError::BadVersion(buf[2]));
    }
    if buf.len() < PREFIX_LEN {
        return Ok(None);
    }
    let protocol = ProtocolId::from_wire_code(buf[3]).ok_or(FrameError::UnknownProtocol(buf[3]))?;
    let id_len = buf[4] as usize;
    if id_len == 0 || id_len > MAX_NODE_ID_LEN {
        return Err(FrameError::LengthInconsistent);
    }
    let len_at = PREFIX_LEN + id_len + 2;
    if buf.len() < len_at + 2 {
        return Ok(None);
    }
    let payload_len = u16::from_be_bytes([buf[len_at], buf[len_at + 1]]) as usize;
    if payload_len > protocol.mtu() {
        return Err(FrameError::LengthInconsistent);
    }
    Ok(Some((protocol, FRAME_OVERHEAD + id_len + payload_len)))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<LinkFrame, FrameError> {
    let (_, total) = announced_len(bytes)?.ok_or(FrameError::Truncated)?;
    if bytes.len() < total {
        return Err(FrameError::Truncated);
    }
    if bytes.len() > total {
        return Err(FrameError::LengthInconsistent);
    }
    decode_exact(bytes)
}

/// Decodes a buffer whose length already matches the announced length.
fn decode_exact(bytes: &[u8]) -> Result<LinkFrame, FrameError> {
    let body = &bytes[..bytes.len() - CRC_LEN];
    let expected = u16::from_be_bytes([bytes[bytes.len() - 2], bytes[bytes.len() - 1]]);
    let computed = crc16_ccitt_false(body);
    if expected != computed {
        return Err(FrameError::CrcMismatch { expected, computed });
    }
    let protocol = ProtocolId::from_wire_code(bytes[3]).ok_or(FrameError::UnknownProtocol(bytes[3]))?;
    let id_len = bytes[4] as usize;
    let id_end = PREFIX_LEN + id_len;
    let node_id = std::str::from_utf8(&bytes[PREFIX_LEN..id_end])
        .map_err(|_| FrameError::NodeIdNotUtf8)?
        .to_string();
    let seq = u16::from_be_bytes([bytes[id_end], bytes[id_end + 1]]);
    let payload = bytes[id_end + MID_LEN..body.len()].to_vec();
    Ok(LinkFrame { protocol, node_id, seq, payload })
}

/// Outcome of pulling from a [`StreamDecoder`].
#[derive(Debug, PartialEq, Eq)]
pub enum StreamItem {
    /// A valid frame and the number of wire bytes it occupied.
    Frame(LinkFrame, usize),
    /// Bytes discarded as one malformed unit.
    Malformed(FrameError, usize),
}

/// Incremental decoder for stream transports, where frames are concatenated
/// back to back. After a structural error it resynchronises on the next magic.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete item, or `None` if more bytes are needed.
    pub fn next_item(&mut self) -> Option<StreamItem> {
        if self.buf.is_empty() {
            return None;
        }
        match announced_len(&self.buf) {
            Ok(None) => None,
            Ok(Some((_, total))) => {
                if self.buf.len() < total {
                    return None;
                }
                let item = match decode_exact(&self.buf[..total]) {
                    Ok(frame) => StreamItem::Frame(frame, total),
                    Err(e) => StreamItem::Malformed(e, total),
                };
                self.buf.drain(..total);
                Some(item)
            }
            Err(e) => {
                // Skip to the next candidate magic byte.
                let skip = self.buf[1..]
                    .iter()
                    .position(|&b| b == MAGIC[0])
                    .map_or(self.buf.len(), |p| p + 1);
                self.buf.drain(..skip);
                Some(StreamItem::Malformed(e, skip))
            }
        }
    }
}
