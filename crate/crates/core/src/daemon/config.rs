use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mqtt::QoS;
use crate::protocol::ProtocolId;
use crate::registry::GatewayIdentity;

pub const DEFAULT_UPSTREAM: &str = "iot.eclipse.org:1883";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Validation { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortConfig {
    pub wifi: u16,
    pub bluetooth: u16,
    pub zigbee: u16,
    pub broker: u16,
    pub api: u16,
}

impl Default for PortConfig {
    fn default() -> Self {
        PortConfig { wifi: 7001, bluetooth: 7002, zigbee: 7003, broker: 1883, api: 8080 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpstreamConfig {
    /// `host:port` of the cloud broker.
    pub address: String,
    pub client_id: String,
    pub qos: u8,
    pub buffer_cap: usize,
    pub keep_alive_s: u16,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        UpstreamConfig {
            address: DEFAULT_UPSTREAM.into(),
            client_id: "piico-gateway".into(),
            qos: 0,
            buffer_cap: 10_000,
            keep_alive_s: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub window_ms: u64,
    /// Windows kept per interface.
    pub window_capacity: usize,
    pub resource_period_s: u64,
    pub resource_capacity: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { window_ms: 1000, window_capacity: 3600, resource_period_s: 10, resource_capacity: 8640 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind_host: IpAddr,
    /// Port 0 binds an ephemeral port.
    pub ports: PortConfig,
    pub upstream: UpstreamConfig,
    pub identity: GatewayIdentity,
    pub state_file: PathBuf,
    pub metrics: MetricsConfig,
    pub recent_capacity: usize,
    /// Frames in flight between the listeners and the ingest task.
    pub ingest_queue: usize,
    pub ui_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            bind_host: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            ports: PortConfig::default(),
            upstream: UpstreamConfig::default(),
            identity: GatewayIdentity::default(),
            state_file: PathBuf::from("gateway-state.json"),
            metrics: MetricsConfig::default(),
            recent_capacity: 10_000,
            ingest_queue: 1024,
            ui_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut seen: BTreeMap<u16, &str> = BTreeMap::new();
        for (name, port) in self.named_ports() {
            if port == 0 {
                continue;
            }
            if let Some(other) = seen.insert(port, name) {
                return Err(invalid(&format!("ports.{name}"), format!("port {port} is also used by ports.{other}")));
            }
        }
        let up = &self.upstream;
        match up.address.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok_and(|p| p != 0) => {}
            _ => return Err(invalid("upstream.address", format!("expected host:port, got {:?}", up.address))),
        }
        if up.client_id.is_empty() || up.client_id.len() > 23 {
            return Err(invalid("upstream.client_id", "must be 1..=23 bytes"));
        }
        QoS::from_u8(up.qos).map_err(|_| invalid("upstream.qos", "must be 0 or 1"))?;
        if up.buffer_cap == 0 {
            return Err(invalid("upstream.buffer_cap", "must be at least 1"));
        }
        for (field, v) in [("identity.gate_id", &self.identity.gate_id), ("identity.network_id", &self.identity.network_id)] {
            if v.is_empty() || v.contains(['/', '+', '#']) {
                return Err(invalid(field, "must be non-empty and topic-safe; use \"-\" for unset"));
            }
        }
        if self.state_file.as_os_str().is_empty() {
            return Err(invalid("state_file", "must not be empty"));
        }
        let m = &self.metrics;
        for (field, v) in [
            ("metrics.window_ms", m.window_ms as usize),
            ("metrics.window_capacity", m.window_capacity),
            ("metrics.resource_period_s", m.resource_period_s as usize),
            ("metrics.resource_capacity", m.resource_capacity),
            ("recent_capacity", self.recent_capacity),
            ("ingest_queue", self.ingest_queue),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    fn named_ports(&self) -> [(&'static str, u16); 5] {
        let p = &self.ports;
        [("wifi", p.wifi), ("bluetooth", p.bluetooth), ("zigbee", p.zigbee), ("broker", p.broker), ("api", p.api)]
    }

    pub fn link_addr(&self, protocol: ProtocolId) -> Option<SocketAddr> {
        let port = match protocol {
            ProtocolId::Wifi => self.ports.wifi,
            ProtocolId::Bluetooth => self.ports.bluetooth,
            ProtocolId::Zigbee => self.ports.zigbee,
            ProtocolId::Ethernet => return None,
        };
        Some(SocketAddr::new(self.bind_host, port))
    }

    pub fn broker_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind_host, self.ports.broker)
    }

    pub fn api_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind_host, self.ports.api)
    }

    pub fn upstream_qos(&self) -> QoS {
        QoS::from_u8(self.upstream.qos).unwrap_or(QoS::AtMostOnce)
    }

    pub fn resource_period(&self) -> Duration {
        Duration::from_secs(self.metrics.resource_period_s)
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<GatewayConfig, ConfigError> {
    let config: GatewayConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<GatewayConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text, path)
}

pub fn dump_config(config: &GatewayConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<GatewayConfig, ConfigError> {
        parse_config(s, Path::new("test.json"))
    }

    #[test]
    fn empty_object_is_all_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, GatewayConfig::default());
        assert_eq!(c.upstream.address, "iot.eclipse.org:1883");
        assert_eq!(c.ports.api, 8080);
        assert_eq!(c.identity, GatewayIdentity::default());
    }

    #[test]
    fn duplicate_port_names_the_field() {
        let err = parse(r#"{"ports": {"api": 1883}}"#).unwrap_err();
        match err {
            ConfigError::Validation { field, reason } => {
                assert_eq!(field, "ports.api");
                assert!(reason.contains("broker"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line() {
        match parse("{\n  \"ports\": {\n    \"api\": \"x\"\n  }\n}").unwrap_err() {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(r#"{"prots": {}}"#), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn field_validation() {
        assert!(parse(r#"{"upstream": {"qos": 2}}"#).is_err());
        assert!(parse(r#"{"upstream": {"address": "nohost"}}"#).is_err());
        assert!(parse(r#"{"metrics": {"window_ms": 0}}"#).is_err());
        assert!(parse(r#"{"identity": {"gate_id": "a/b"}}"#).is_err());
        // Ephemeral ports never collide.
        parse(r#"{"ports": {"wifi": 0, "bluetooth": 0, "zigbee": 0, "broker": 0, "api": 0}}"#).unwrap();
    }

    #[test]
    fn full_config_round_trips() {
        let c = GatewayConfig {
            bind_host: "127.0.0.1".parse().unwrap(),
            ports: PortConfig { wifi: 9001, bluetooth: 9002, zigbee: 9003, broker: 9883, api: 9080 },
            upstream: UpstreamConfig {
                address: "127.0.0.1:18830".into(),
                client_id: "gw-7".into(),
                qos: 1,
                buffer_cap: 500,
                keep_alive_s: 10,
            },
            identity: GatewayIdentity { gate_id: "gw7".into(), network_id: "campus".into() },
            state_file: "/var/lib/gw/state.json".into(),
            metrics: MetricsConfig { window_ms: 500, window_capacity: 100, resource_period_s: 5, resource_capacity: 10 },
            recent_capacity: 50,
            ingest_queue: 16,
            ui_dir: Some("/srv/ui".into()),
        };
        let text = dump_config(&c);
        assert_eq!(parse(&text).unwrap(), c);
        assert_eq!(dump_config(&parse(&text).unwrap()), text);
    }
}
