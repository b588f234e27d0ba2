//! MQTT 3.1.1 packet codec, limited to QoS 0 and 1.

use thiserror::Error;

use super::topic::{TopicError, TopicFilter, TopicName};

/// Largest value the four-byte remaining-length field can carry.
pub const MAX_REMAINING_LENGTH: usize = 268_435_455;
pub const PROTOCOL_NAME: &str = "MQTT";
pub const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum QoS {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
}

impl QoS {
    pub fn from_u8(v: u8) -> Result<Self, DecodeError> {
        match v {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Err(DecodeError::UnsupportedQos(2)),
            other => Err(DecodeError::ProtocolViolation(format!("invalid qos {other}"))),
        }
    }
}

/// CONNACK return codes.
pub mod connect_code {
    pub const ACCEPTED: u8 = 0;
    pub const UNACCEPTABLE_PROTOCOL: u8 = 1;
    pub const IDENTIFIER_REJECTED: u8 = 2;
    pub const SERVER_UNAVAILABLE: u8 = 3;
    pub const BAD_CREDENTIALS: u8 = 4;
    pub const NOT_AUTHORIZED: u8 = 5;
}

/// SUBACK code for a refused filter.
pub const SUBACK_FAILURE: u8 = 0x80;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LastWill {
    pub topic: TopicName,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive: u16,
    pub clean_session: bool,
    pub will: Option<LastWill>,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

impl Connect {
    pub fn new(client_id: impl Into<String>, keep_alive: u16) -> Self {
        Connect { client_id: client_id.into(), keep_alive, clean_session: true, will: None, username: None, password: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: TopicName,
    /// Present exactly when `qos` is 1.
    pub packet_id: Option<u16>,
    pub payload: Vec<u8>,
}

impl Publish {
    pub fn new(topic: TopicName, payload: impl Into<Vec<u8>>) -> Self {
        Publish { dup: false, qos: QoS::AtMostOnce, retain: false, topic, packet_id: None, payload: payload.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck { session_present: bool, code: u8 },
    Publish(Publish),
    PubAck { packet_id: u16 },
    Subscribe { packet_id: u16, filters: Vec<(TopicFilter, QoS)> },
    SubAck { packet_id: u16, codes: Vec<u8> },
    Unsubscribe { packet_id: u16, filters: Vec<TopicFilter> },
    UnsubAck { packet_id: u16 },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("remaining length {0} exceeds {MAX_REMAINING_LENGTH}")]
    Oversize(usize),
    #[error("string field of {0} bytes exceeds 65535")]
    StringTooLong(usize),
    #[error("qos {qos:?} publish with packet id {packet_id:?}")]
    PacketIdMismatch { qos: QoS, packet_id: Option<u16> },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("malformed remaining length")]
    MalformedRemainingLength,
    #[error("unsupported qos {0}")]
    UnsupportedQos(u8),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

impl From<TopicError> for DecodeError {
    fn from(e: TopicError) -> Self {
        DecodeError::ProtocolViolation(e.to_string())
    }
}

pub fn encode_remaining_length(mut len: usize, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    if len > MAX_REMAINING_LENGTH {
        return Err(EncodeError::Oversize(len));
    }
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            return Ok(());
        }
    }
}

/// Returns `(value, bytes used)`, or `None` if the field is incomplete.
pub fn decode_remaining_length(buf: &[u8]) -> Result<Option<(usize, usize)>, DecodeError> {
    let mut value = 0usize;
    for (i, &byte) in buf.iter().enumerate() {
        if i == 4 {
            return Err(DecodeError::MalformedRemainingLength);
        }
        value += ((byte & 0x7F) as usize) << (7 * i);
        if byte & 0x80 == 0 {
            return Ok(Some((value, i + 1)));
        }
    }
    if buf.len() >= 4 {
        return Err(DecodeError::MalformedRemainingLength);
    }
    Ok(None)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), EncodeError> {
    put_bytes(out, s.as_bytes())
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<(), EncodeError> {
    let len = u16::try_from(b.len()).map_err(|_| EncodeError::StringTooLong(b.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(b);
    Ok(())
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, EncodeError> {
    let mut body = Vec::new();
    let first: u8 = match packet {
        Packet::Connect(c) => {
            put_str(&mut body, PROTOCOL_NAME)?;
            body.push(PROTOCOL_LEVEL);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if let Some(w) = &c.will {
                flags |= 0x04 | ((w.qos as u8) << 3);
                if w.retain {
                    flags |= 0x20;
                }
            }
            if c.password.is_some() {
                flags |= 0x40;
            }
            if c.username.is_some() {
                flags |= 0x80;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive.to_be_bytes());
            put_str(&mut body, &c.client_id)?;
            if let Some(w) = &c.will {
                put_str(&mut body, w.topic.as_str())?;
                put_bytes(&mut body, &w.payload)?;
            }
            if let Some(u) = &c.username {
                put_str(&mut body, u)?;
            }
            if let Some(p) = &c.password {
                put_bytes(&mut body, p)?;
            }
            0x10
        }
        Packet::ConnAck { session_present, code } => {
            body.push(u8::from(*session_present));
            body.push(*code);
            0x20
        }
        Packet::Publish(p) => {
            if (p.qos == QoS::AtMostOnce) != p.packet_id.is_none() {
                return Err(EncodeError::PacketIdMismatch { qos: p.qos, packet_id: p.packet_id });
            }
            put_str(&mut body, p.topic.as_str())?;
            if let Some(id) = p.packet_id {
                body.extend_from_slice(&id.to_be_bytes());
            }
            body.extend_from_slice(&p.payload);
            0x30 | (u8::from(p.dup) << 3) | ((p.qos as u8) << 1) | u8::from(p.retain)
        }
        Packet::PubAck { packet_id } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            0x40
        }
        Packet::Subscribe { packet_id, filters } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            for (f, q) in filters {
                put_str(&mut body, f.as_str())?;
                body.push(*q as u8);
            }
            0x82
        }
        Packet::SubAck { packet_id, codes } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            body.extend_from_slice(codes);
            0x90
        }
        Packet::Unsubscribe { packet_id, filters } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            for f in filters {
                put_str(&mut body, f.as_str())?;
            }
            0xA2
        }
        Packet::UnsubAck { packet_id } => {
            body.extend_from_slice(&packet_id.to_be_bytes());
            0xB0
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(first);
    encode_remaining_length(body.len(), &mut out)?;
    out.extend_from_slice(&body);
    Ok(out)
}

/// Total size of the packet at the head of `buf`, once the fixed header is complete.
pub fn packet_len(buf: &[u8]) -> Result<Option<usize>, DecodeError> {
    if buf.is_empty() {
        return Ok(None);
    }
    Ok(decode_remaining_length(&buf[1..])?.map(|(len, used)| 1 + used + len))
}

/// Decodes one packet from the front of `buf`. `Ok(None)` means more bytes are
/// needed; nothing is consumed in that case.
pub fn decode_packet(buf: &[u8]) -> Result<Option<(Packet, usize)>, DecodeError> {
    if buf.is_empty() {
        return Ok(None);
    }
    let Some((len, used)) = decode_remaining_length(&buf[1..])? else { return Ok(None) };
    let total = 1 + used + len;
    if buf.len() < total {
        return Ok(None);
    }
    let packet = decode_body(buf[0], &buf[1 + used..total])?;
    Ok(Some((packet, total)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn short() -> DecodeError {
        DecodeError::ProtocolViolation("packet shorter than its fields".into())
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self.buf.get(self.pos).ok_or_else(Self::short)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        let end = self.pos + len;
        let s = self.buf.get(self.pos..end).ok_or_else(Self::short)?;
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| DecodeError::ProtocolViolation("string is not UTF-8".into()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(DecodeError::ProtocolViolation("trailing bytes in packet".into()))
        }
    }
}

fn expect_flags(first: u8, want: u8) -> Result<(), DecodeError> {
    if first & 0x0F != want {
        return Err(DecodeError::ProtocolViolation(format!("bad fixed-header flags {:#04x}", first)));
    }
    Ok(())
}

fn decode_body(first: u8, body: &[u8]) -> Result<Packet, DecodeError> {
    let mut r = Reader::new(body);
    let packet = match first >> 4 {
        1 => {
            expect_flags(first, 0)?;
            let name = r.string()?;
            let level = r.u8()?;
            if name != PROTOCOL_NAME || level != PROTOCOL_LEVEL {
                return Err(DecodeError::ProtocolViolation(format!("unsupported protocol {name} level {level}")));
            }
            let flags = r.u8()?;
            if flags & 0x01 != 0 {
                return Err(DecodeError::ProtocolViolation("reserved connect flag set".into()));
            }
            let keep_alive = r.u16()?;
            let client_id = r.string()?;
            let will = if flags & 0x04 != 0 {
                let qos = QoS::from_u8((flags >> 3) & 0x03)?;
                let topic = TopicName::new(r.string()?)?;
                let payload = r.bytes()?.to_vec();
                Some(LastWill { topic, payload, qos, retain: flags & 0x20 != 0 })
            } else {
                if flags & 0x38 != 0 {
                    return Err(DecodeError::ProtocolViolation("will flags without will".into()));
                }
                None
            };
            let username = if flags & 0x80 != 0 { Some(r.string()?) } else { None };
            let password = if flags & 0x40 != 0 { Some(r.bytes()?.to_vec()) } else { None };
            Packet::Connect(Connect { client_id, keep_alive, clean_session: flags & 0x02 != 0, will, username, password })
        }
        2 => {
            expect_flags(first, 0)?;
            let ack = r.u8()?;
            if ack & 0xFE != 0 {
                return Err(DecodeError::ProtocolViolation("reserved connack bits set".into()));
            }
            Packet::ConnAck { session_present: ack == 1, code: r.u8()? }
        }
        3 => {
            let qos_bits = (first >> 1) & 0x03;
            let qos = QoS::from_u8(qos_bits)?;
            let dup = first & 0x08 != 0;
            if dup && qos == QoS::AtMostOnce {
                return Err(DecodeError::ProtocolViolation("dup set on qos 0 publish".into()));
            }
            let topic = TopicName::new(r.string()?)?;
            let packet_id = match qos {
                QoS::AtMostOnce => None,
                QoS::AtLeastOnce => Some(r.u16()?),
            };
            let payload = r.rest().to_vec();
            Packet::Publish(Publish { dup, qos, retain: first & 0x01 != 0, topic, packet_id, payload })
        }
        4 => {
            expect_flags(first, 0)?;
            Packet::PubAck { packet_id: r.u16()? }
        }
        5..=7 => return Err(DecodeError::UnsupportedQos(2)),
        8 => {
            expect_flags(first, 0x02)?;
            let packet_id = r.u16()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                let f = TopicFilter::new(r.string()?)?;
                let q = r.u8()?;
                if q & 0xFC != 0 {
                    return Err(DecodeError::ProtocolViolation("reserved subscription bits".into()));
                }
                filters.push((f, QoS::from_u8(q)?));
            }
            if filters.is_empty() {
                return Err(DecodeError::ProtocolViolation("subscribe without filters".into()));
            }
            Packet::Subscribe { packet_id, filters }
        }
        9 => {
            expect_flags(first, 0)?;
            let packet_id = r.u16()?;
            let codes = r.rest().to_vec();
            if let Some(bad) = codes.iter().find(|c| !matches!(**c, 0 | 1 | SUBACK_FAILURE)) {
                return Err(if *bad == 2 {
                    DecodeError::UnsupportedQos(2)
                } else {
                    DecodeError::ProtocolViolation(format!("bad suback code {bad}"))
                });
            }
            Packet::SubAck { packet_id, codes }
        }
        10 => {
            expect_flags(first, 0x02)?;
            let packet_id = r.u16()?;
            let mut filters = Vec::new();
            while !r.is_empty() {
                filters.push(TopicFilter::new(r.string()?)?);
            }
            if filters.is_empty() {
                return Err(DecodeError::ProtocolViolation("unsubscribe without filters".into()));
            }
            Packet::Unsubscribe { packet_id, filters }
        }
        11 => {
            expect_flags(first, 0)?;
            Packet::UnsubAck { packet_id: r.u16()? }
        }
        12 => {
            expect_flags(first, 0)?;
            Packet::PingReq
        }
        13 => {
            expect_flags(first, 0)?;
            Packet::PingResp
        }
        14 => {
            expect_flags(first, 0)?;
            Packet::Disconnect
        }
        t => return Err(DecodeError::ProtocolViolation(format!("unknown packet type {t}"))),
    };
    r.finish()?;
    Ok(packet)
}
