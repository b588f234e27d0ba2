//! Turns raw link payloads into the canonical nine-field sensor record.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::protocol::ProtocolId;
use crate::registry::GatewayIdentity;

/// Rendering of the `date` field, e.g. `09/13/19-08:59:18`.
pub const DATE_FORMAT: &str = "%m/%d/%y-%H:%M:%S";
/// Placeholder for identity fields that are not known.
pub const UNSET: &str = "-";

/// One reading as carried inside a link payload: `sensor-id;value;magnitude`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReading {
    pub sensor_id: String,
    pub value: String,
    pub magnitude: String,
}

impl RawReading {
    pub fn new(sensor_id: impl Into<String>, value: impl Into<String>, magnitude: impl Into<String>) -> Self {
        RawReading { sensor_id: sensor_id.into(), value: value.into(), magnitude: magnitude.into() }
    }

    pub fn to_line(&self) -> String {
        format!("{};{};{}", self.sensor_id, self.value, self.magnitude)
    }
}

/// Encodes readings as a newline-separated payload.
pub fn encode_payload(readings: &[RawReading]) -> Vec<u8> {
    readings.iter().map(RawReading::to_line).collect::<Vec<_>>().join("\n").into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("payload is not valid UTF-8")]
    NotUtf8,
    #[error("malformed reading on line {line}: {text:?}")]
    MalformedReading { line: usize, text: String },
}

pub fn parse_payload(payload: &[u8]) -> Result<Vec<RawReading>, PayloadError> {
    let text = std::str::from_utf8(payload).map_err(|_| PayloadError::NotUtf8)?;
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(';').collect();
        match fields.as_slice() {
            [sensor, value, magnitude] if !sensor.is_empty() => out.push(RawReading::new(*sensor, *value, *magnitude)),
            _ => return Err(PayloadError::MalformedReading { line: i + 1, text: line.to_string() }),
        }
    }
    Ok(out)
}

/// The normalized record. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorRecord {
    #[serde(rename = "node-id")]
    pub node_id: String,
    pub gps: String,
    pub protocol: ProtocolId,
    #[serde(with = "date_format")]
    pub date: NaiveDateTime,
    #[serde(rename = "sensor-id")]
    pub sensor_id: String,
    pub value: String,
    pub magnitude: String,
    #[serde(rename = "gate-id")]
    pub gate_id: String,
    #[serde(rename = "network-id")]
    pub network_id: String,
}

pub const RECORD_KEYS: [&str; 9] =
    ["node-id", "gps", "protocol", "date", "sensor-id", "value", "magnitude", "gate-id", "network-id"];

mod date_format {
    use super::DATE_FORMAT;
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(date: &NaiveDateTime, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&date.format(DATE_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&s, DATE_FORMAT).map_err(serde::de::Error::custom)
    }
}

fn or_unset(s: &str) -> String {
    if s.is_empty() {
        UNSET.to_string()
    } else {
        s.to_string()
    }
}

/// Builds the canonical record for one reading. `gps_of` looks the node up in
/// the registry; unregistered nodes get `"-"`.
pub fn normalize(
    reading: &RawReading,
    protocol: ProtocolId,
    node_id: &str,
    receipt_time: NaiveDateTime,
    identity: &GatewayIdentity,
    gps_of: impl FnOnce(&str) -> Option<String>,
) -> SensorRecord {
    debug_assert!(!node_id.is_empty());
    SensorRecord {
        node_id: node_id.to_string(),
        gps: gps_of(node_id).map_or_else(|| UNSET.to_string(), |g| or_unset(&g)),
        protocol,
        // Sub-second precision is not representable in the record.
        date: receipt_time.with_nanosecond_truncated(),
        sensor_id: reading.sensor_id.clone(),
        value: reading.value.clone(),
        magnitude: reading.magnitude.clone(),
        gate_id: or_unset(&identity.gate_id),
        network_id: or_unset(&identity.network_id),
    }
}

trait TruncateNanos {
    fn with_nanosecond_truncated(self) -> Self;
}

impl TruncateNanos for NaiveDateTime {
    fn with_nanosecond_truncated(self) -> Self {
        use chrono::Timelike;
        self.with_nanosecond(0).unwrap_or(self)
    }
}

/// Canonical serialization: two-space indented JSON, keys in record order.
pub fn serialize_record(rec: &SensorRecord) -> Vec<u8> {
    serde_json::to_vec_pretty(rec).expect("record serialization is infallible")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing key {0:?}")]
    MissingKey(&'static str),
    #[error("key {0:?} must hold a string")]
    NotAString(&'static str),
    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),
    #[error("bad date {0:?}")]
    BadDate(String),
}

/// Parses a record regardless of key order or whitespace.
pub fn parse_record(bytes: &[u8]) -> Result<SensorRecord, RecordError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| RecordError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(RecordError::NotAnObject)?;
    let field = |key: &'static str| -> Result<String, RecordError> {
        match obj.get(key) {
            None => Err(RecordError::MissingKey(key)),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(RecordError::NotAString(key)),
        }
    };
    let protocol_s = field("protocol")?;
    let protocol = protocol_s.parse().map_err(|_| RecordError::UnknownProtocol(protocol_s))?;
    let date_s = field("date")?;
    let date = NaiveDateTime::parse_from_str(&date_s, DATE_FORMAT).map_err(|_| RecordError::BadDate(date_s))?;
    Ok(SensorRecord {
        node_id: field("node-id")?,
        gps: field("gps")?,
        protocol,
        date,
        sensor_id: field("sensor-id")?,
        value: field("value")?,
        magnitude: field("magnitude")?,
        gate_id: field("gate-id")?,
        network_id: field("network-id")?,
    })
}
