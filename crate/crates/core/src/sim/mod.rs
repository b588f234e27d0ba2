//! Simulated wireless sensor nodes for the two-node, six-sensor weather station.

mod generator;
mod runner;

pub use generator::{generate_reading, GeneratorError, GeneratorKind, GeneratorState, SensorGenerator};
pub use runner::{run_fleet, run_node, NodeLinks, ProtocolReport, RunReport, SimError, SocketLinks};

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::protocol::ProtocolId;

pub const DEFAULT_PERIOD_S: u32 = 6;
pub const DEFAULT_DURATION_S: u32 = 480;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    pub magnitude: String,
    pub protocol: ProtocolId,
    pub generator: SensorGenerator,
}

fn default_period() -> u32 {
    DEFAULT_PERIOD_S
}

fn default_duration() -> u32 {
    DEFAULT_DURATION_S
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimNodeConfig {
    pub node_id: String,
    /// Gateway link endpoint per protocol.
    pub endpoints: BTreeMap<ProtocolId, SocketAddr>,
    /// Downlink broker for `piico/cfg/<node-id>`. `None` disables config.
    #[serde(default)]
    pub broker: Option<SocketAddr>,
    #[serde(default = "default_period")]
    pub sampling_period: u32,
    pub sensors: Vec<SensorSpec>,
    #[serde(default = "default_duration")]
    pub run_duration: u32,
    /// Wall-clock speed-up. Periods and duration stay in nominal seconds and
    /// are divided by this factor when waiting.
    #[serde(default = "default_scale")]
    pub time_scale: f64,
}

impl SimNodeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |why: String| Err(SimError::Config { node: self.node_id.clone(), reason: why });
        if self.node_id.is_empty() || self.node_id.len() > crate::link::frame::MAX_NODE_ID_LEN {
            return bad("node_id must be 1..=32 bytes".into());
        }
        if self.sampling_period == 0 {
            return bad("sampling_period must be at least 1 s".into());
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return bad("time_scale must be positive".into());
        }
        for s in &self.sensors {
            if !self.endpoints.contains_key(&s.protocol) {
                return bad(format!("sensor {} uses {} but no endpoint is configured", s.sensor_id, s.protocol));
            }
            if s.sensor_id.is_empty() || s.sensor_id.contains([';', '\n']) || s.magnitude.contains([';', '\n']) {
                return bad(format!("sensor {:?} has an unencodable id or magnitude", s.sensor_id));
            }
            s.generator.validate().map_err(|e| SimError::Config { node: self.node_id.clone(), reason: e.to_string() })?;
        }
        let mut ids: Vec<&str> = self.sensors.iter().map(|s| s.sensor_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate sensor id".into());
        }
        Ok(())
    }

    /// Nominal seconds to wall-clock time.
    pub fn scaled(&self, secs: f64) -> Duration {
        Duration::from_secs_f64(secs / self.time_scale)
    }
}

/// Gateway endpoints on one host with the default ports.
pub fn default_endpoints(host: std::net::IpAddr) -> BTreeMap<ProtocolId, SocketAddr> {
    [(ProtocolId::Wifi, 7001), (ProtocolId::Bluetooth, 7002), (ProtocolId::Zigbee, 7003)]
        .into_iter()
        .map(|(p, port)| (p, SocketAddr::new(host, port)))
        .collect()
}

/// The six station sensors, seeded per node.
pub fn station_sensors(node_index: u64) -> Vec<SensorSpec> {
    let spec = |i: u64, id: &str, mag: &str, p: ProtocolId, min: f64, max: f64, step: f64| SensorSpec {
        sensor_id: id.into(),
        magnitude: mag.into(),
        protocol: p,
        generator: SensorGenerator::random_walk(min, max, step, 1000 * (node_index + 1) + i),
    };
    vec![
        spec(0, "Temperature", "celcius", ProtocolId::Wifi, 10.0, 35.0, 0.2),
        spec(1, "Humidity", "percent", ProtocolId::Wifi, 20.0, 90.0, 0.5),
        spec(2, "SolarRadiation", "w/m2", ProtocolId::Zigbee, 0.0, 1200.0, 15.0),
        spec(3, "Precipitation", "mm", ProtocolId::Zigbee, 0.0, 10.0, 0.1),
        spec(4, "WindSpeed", "m/s", ProtocolId::Bluetooth, 0.0, 20.0, 0.4),
        spec(5, "WindDirection", "degrees", ProtocolId::Bluetooth, 0.0, 337.5, 22.5),
    ]
}

/// Two nodes, six sensors each, 6 s period, 480 s run.
pub fn default_fleet(endpoints: &BTreeMap<ProtocolId, SocketAddr>, broker: Option<SocketAddr>) -> Vec<SimNodeConfig> {
    ["nodo1", "nodo2"]
        .into_iter()
        .enumerate()
        .map(|(i, id)| SimNodeConfig {
            node_id: id.into(),
            endpoints: endpoints.clone(),
            broker,
            sampling_period: DEFAULT_PERIOD_S,
            sensors: station_sensors(i as u64),
            run_duration: DEFAULT_DURATION_S,
            time_scale: 1.0,
        })
        .collect()
}
