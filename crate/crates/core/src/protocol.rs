use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Device-side link protocol a reading travelled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolId {
    Wifi,
    Bluetooth,
    Zigbee,
    Ethernet,
}

/// The three radio links that carry sensor traffic. Ethernet is accepted in
/// configuration but has no endpoint.
pub const RADIO_LINKS: [ProtocolId; 3] = [ProtocolId::Wifi, ProtocolId::Bluetooth, ProtocolId::Zigbee];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown protocol {0:?}")]
pub struct UnknownProtocol(pub String);

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [
        ProtocolId::Wifi,
        ProtocolId::Bluetooth,
        ProtocolId::Zigbee,
        ProtocolId::Ethernet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Wifi => "wifi",
            ProtocolId::Bluetooth => "bluetooth",
            ProtocolId::Zigbee => "zigbee",
            ProtocolId::Ethernet => "ethernet",
        }
    }

    /// Largest payload a single link frame may carry on this protocol.
    pub fn mtu(self) -> usize {
        match self {
            ProtocolId::Zigbee => 100,
            ProtocolId::Bluetooth => 990,
            ProtocolId::Wifi | ProtocolId::Ethernet => 1400,
        }
    }

    /// Protocol byte used in the link frame header.
    pub fn wire_code(self) -> u8 {
        match self {
            ProtocolId::Wifi => 0x01,
            ProtocolId::Bluetooth => 0x02,
            ProtocolId::Zigbee => 0x03,
            ProtocolId::Ethernet => 0x04,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0x01 => Some(ProtocolId::Wifi),
            0x02 => Some(ProtocolId::Bluetooth),
            0x03 => Some(ProtocolId::Zigbee),
            0x04 => Some(ProtocolId::Ethernet),
            _ => None,
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| UnknownProtocol(s.to_string()))
    }
}
