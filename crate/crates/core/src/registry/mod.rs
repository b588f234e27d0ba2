//! Node, sensor and rule registry with persisted state and retained config push.

pub mod api;
mod recent;
mod rules;
mod store;

pub use recent::RecentRecords;
pub use rules::{evaluate_rules, parse_decimal, Alert, RuleOutcome};
pub use store::{config_payload, replay_log, ConfigSink, Registry, StoreError};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::link::frame::MAX_NODE_ID_LEN;
use crate::mqtt::TopicName;
use crate::normalizer::UNSET;
use crate::protocol::{ProtocolId, RADIO_LINKS};

pub const CONFIG_TOPIC_PREFIX: &str = "piico/cfg/";
pub const ALERT_TOPIC_PREFIX: &str = "piico/alerts/";
pub const DEFAULT_SAMPLING_PERIOD: u32 = 6;

pub fn config_topic(node_id: &str) -> String {
    format!("{CONFIG_TOPIC_PREFIX}{node_id}")
}

fn unset() -> String {
    UNSET.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayIdentity {
    #[serde(default = "unset")]
    pub gate_id: String,
    #[serde(default = "unset")]
    pub network_id: String,
}

impl Default for GatewayIdentity {
    fn default() -> Self {
        GatewayIdentity { gate_id: unset(), network_id: unset() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorDescriptor {
    pub sensor_id: String,
    pub magnitude: String,
    #[serde(rename = "protocol")]
    pub assigned_protocol: ProtocolId,
}

fn default_period() -> u32 {
    DEFAULT_SAMPLING_PERIOD
}

fn default_true() -> bool {
    true
}

fn default_links() -> Vec<ProtocolId> {
    RADIO_LINKS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: String,
    #[serde(default = "unset")]
    pub gps: String,
    #[serde(default = "default_period")]
    pub sampling_period: u32,
    #[serde(default)]
    pub sensors: Vec<SensorDescriptor>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Links the node is equipped with.
    #[serde(default = "default_links")]
    pub links: Vec<ProtocolId>,
}

impl NodeDescriptor {
    pub fn new(node_id: impl Into<String>) -> Self {
        NodeDescriptor {
            node_id: node_id.into(),
            gps: unset(),
            sampling_period: DEFAULT_SAMPLING_PERIOD,
            sensors: Vec::new(),
            enabled: true,
            links: default_links(),
        }
    }

    pub fn sensor(&self, sensor_id: &str) -> Option<&SensorDescriptor> {
        self.sensors.iter().find(|s| s.sensor_id == sensor_id)
    }

    /// The retained configuration a node should run with.
    pub fn config_command(&self) -> ConfigCommand {
        ConfigCommand {
            target_node: self.node_id.clone(),
            sampling_period: Some(self.sampling_period),
            protocol_overrides: Some(self.sensors.iter().map(|s| (s.sensor_id.clone(), s.assigned_protocol)).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Eq => value == threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRule {
    pub rule_id: String,
    #[serde(default = "any_node")]
    pub node_selector: String,
    pub sensor_selector: String,
    pub comparator: Comparator,
    pub threshold: f64,
    /// Empty means `piico/alerts/<rule_id>`.
    #[serde(default)]
    pub action_topic: String,
    #[serde(default = "default_true")]
    pub armed: bool,
}

fn any_node() -> String {
    "*".to_string()
}

impl AlarmRule {
    pub fn with_defaults(mut self) -> Self {
        if self.action_topic.is_empty() {
            self.action_topic = format!("{ALERT_TOPIC_PREFIX}{}", self.rule_id);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigCommand {
    pub target_node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_overrides: Option<BTreeMap<String, ProtocolId>>,
}

impl ConfigCommand {
    pub fn is_empty(&self) -> bool {
        self.sampling_period.is_none() && self.protocol_overrides.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("node {0} already registered")]
    DuplicateNode(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {node} has no sensor {sensor}")]
    UnknownSensor { node: String, sensor: String },
    #[error("node {node} already has sensor {sensor}")]
    DuplicateSensor { node: String, sensor: String },
    #[error("sampling period must be a positive number of seconds, got {0}")]
    InvalidPeriod(i64),
    #[error("node {node} has no {protocol} link")]
    UnknownLink { node: String, protocol: ProtocolId },
    #[error("rule {0} already exists")]
    DuplicateRule(String),
    #[error("unknown rule {0}")]
    UnknownRule(String),
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("state not persisted: {0}")]
    Storage(String),
}

impl RegistryError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        RegistryError::Validation { field: field.to_string(), reason: reason.into() }
    }

    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::DuplicateNode(_) => "duplicate-node",
            RegistryError::UnknownNode(_) => "unknown-node",
            RegistryError::UnknownSensor { .. } => "unknown-sensor",
            RegistryError::DuplicateSensor { .. } => "duplicate-sensor",
            RegistryError::InvalidPeriod(_) => "invalid-period",
            RegistryError::UnknownLink { .. } => "unknown-link",
            RegistryError::DuplicateRule(_) => "duplicate-rule",
            RegistryError::UnknownRule(_) => "unknown-rule",
            RegistryError::Validation { .. } => "validation",
            RegistryError::Storage(_) => "storage",
        }
    }
}

/// One accepted state mutation, as written to the change log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Change {
    RegisterNode { node: NodeDescriptor },
    RemoveNode { node_id: String },
    UpdateNode {
        node_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sampling_period: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gps: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        enabled: Option<bool>,
    },
    AssignProtocol { node_id: String, sensor_id: String, protocol: ProtocolId },
    AddSensor { node_id: String, sensor: SensorDescriptor },
    RemoveSensor { node_id: String, sensor_id: String },
    AddRule { rule: AlarmRule },
    RemoveRule { rule_id: String },
    SetIdentity { identity: GatewayIdentity },
}

impl Change {
    /// Node whose retained config this change affects.
    pub fn touched_node(&self) -> Option<&str> {
        match self {
            Change::RegisterNode { node } => Some(&node.node_id),
            Change::RemoveNode { node_id }
            | Change::UpdateNode { node_id, .. }
            | Change::AssignProtocol { node_id, .. }
            | Change::AddSensor { node_id, .. }
            | Change::RemoveSensor { node_id, .. } => Some(node_id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryState {
    #[serde(default)]
    pub identity: GatewayIdentity,
    #[serde(default)]
    pub nodes: BTreeMap<String, NodeDescriptor>,
    #[serde(default)]
    pub rules: BTreeMap<String, AlarmRule>,
}

fn check_token(field: &str, s: &str, max: usize) -> Result<(), RegistryError> {
    if s.is_empty() {
        return Err(RegistryError::invalid(field, "must not be empty"));
    }
    if s.len() > max {
        return Err(RegistryError::invalid(field, format!("longer than {max} bytes")));
    }
    // These characters would break topics or the reading grammar.
    if let Some(c) = s.chars().find(|c| matches!(c, '/' | '+' | '#' | ';' | '\n' | '\r') || c.is_control()) {
        return Err(RegistryError::invalid(field, format!("contains {c:?}")));
    }
    Ok(())
}

fn check_period(p: u32) -> Result<(), RegistryError> {
    if p == 0 {
        return Err(RegistryError::InvalidPeriod(0));
    }
    Ok(())
}

fn check_gps(gps: &str) -> Result<(), RegistryError> {
    if gps.is_empty() || gps.chars().any(|c| c.is_control()) {
        return Err(RegistryError::invalid("gps", "expected a coordinate pair or \"-\""));
    }
    Ok(())
}

fn check_sensor(node: &NodeDescriptor, s: &SensorDescriptor) -> Result<(), RegistryError> {
    check_token("sensor_id", &s.sensor_id, 64)?;
    check_token("magnitude", &s.magnitude, 64)?;
    if !node.links.contains(&s.assigned_protocol) {
        return Err(RegistryError::UnknownLink { node: node.node_id.clone(), protocol: s.assigned_protocol });
    }
    Ok(())
}

fn check_node(node: &NodeDescriptor) -> Result<(), RegistryError> {
    check_token("node_id", &node.node_id, MAX_NODE_ID_LEN)?;
    check_period(node.sampling_period)?;
    check_gps(&node.gps)?;
    if node.links.is_empty() {
        return Err(RegistryError::invalid("links", "a node needs at least one link"));
    }
    let mut seen = HashSet::new();
    for s in &node.sensors {
        check_sensor(node, s)?;
        if !seen.insert(s.sensor_id.as_str()) {
            return Err(RegistryError::DuplicateSensor { node: node.node_id.clone(), sensor: s.sensor_id.clone() });
        }
    }
    Ok(())
}

fn check_rule(rule: &AlarmRule) -> Result<(), RegistryError> {
    check_token("rule_id", &rule.rule_id, 64)?;
    if rule.sensor_selector.is_empty() {
        return Err(RegistryError::invalid("sensor_selector", "must not be empty"));
    }
    if rule.node_selector.is_empty() {
        return Err(RegistryError::invalid("node_selector", "must not be empty"));
    }
    if !rule.threshold.is_finite() {
        return Err(RegistryError::invalid("threshold", "must be finite"));
    }
    TopicName::new(rule.action_topic.as_str()).map_err(|e| RegistryError::invalid("action_topic", e.to_string()))?;
    Ok(())
}

impl RegistryState {
    /// Applies a change, or leaves the state untouched and reports why not.
    pub fn apply(&mut self, change: &Change) -> Result<(), RegistryError> {
        match change {
            Change::RegisterNode { node } => {
                check_node(node)?;
                if self.nodes.contains_key(&node.node_id) {
                    return Err(RegistryError::DuplicateNode(node.node_id.clone()));
                }
                self.nodes.insert(node.node_id.clone(), node.clone());
            }
            Change::RemoveNode { node_id } => {
                self.nodes.remove(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.clone()))?;
            }
            Change::UpdateNode { node_id, sampling_period, gps, enabled } => {
                if sampling_period.is_none() && gps.is_none() && enabled.is_none() {
                    return Err(RegistryError::invalid("body", "nothing to update"));
                }
                if let Some(p) = sampling_period {
                    check_period(*p)?;
                }
                if let Some(g) = gps {
                    check_gps(g)?;
                }
                let node = self.node_mut(node_id)?;
                if let Some(p) = sampling_period {
                    node.sampling_period = *p;
                }
                if let Some(g) = gps {
                    node.gps = g.clone();
                }
                if let Some(e) = enabled {
                    node.enabled = *e;
                }
            }
            Change::AssignProtocol { node_id, sensor_id, protocol } => {
                let node = self.node_mut(node_id)?;
                if !node.links.contains(protocol) {
                    return Err(RegistryError::UnknownLink { node: node_id.clone(), protocol: *protocol });
                }
                let sensor = node
                    .sensors
                    .iter_mut()
                    .find(|s| &s.sensor_id == sensor_id)
                    .ok_or_else(|| RegistryError::UnknownSensor { node: node_id.clone(), sensor: sensor_id.clone() })?;
                sensor.assigned_protocol = *protocol;
            }
            Change::AddSensor { node_id, sensor } => {
                let node = self.node_mut(node_id)?;
                check_sensor(node, sensor)?;
                if node.sensor(&sensor.sensor_id).is_some() {
                    return Err(RegistryError::DuplicateSensor { node: node_id.clone(), sensor: sensor.sensor_id.clone() });
                }
                node.sensors.push(sensor.clone());
            }
            Change::RemoveSensor { node_id, sensor_id } => {
                let node = self.node_mut(node_id)?;
                let pos = node
                    .sensors
                    .iter()
                    .position(|s| &s.sensor_id == sensor_id)
                    .ok_or_else(|| RegistryError::UnknownSensor { node: node_id.clone(), sensor: sensor_id.clone() })?;
                node.sensors.remove(pos);
            }
            Change::AddRule { rule } => {
                check_rule(rule)?;
                if self.rules.contains_key(&rule.rule_id) {
                    return Err(RegistryError::DuplicateRule(rule.rule_id.clone()));
                }
                self.rules.insert(rule.rule_id.clone(), rule.clone());
            }
            Change::RemoveRule { rule_id } => {
                self.rules.remove(rule_id).ok_or_else(|| RegistryError::UnknownRule(rule_id.clone()))?;
            }
            Change::SetIdentity { identity } => {
                for (field, v) in [("gate_id", &identity.gate_id), ("network_id", &identity.network_id)] {
                    if v.is_empty() || v.chars().any(|c| c.is_control()) {
                        return Err(RegistryError::invalid(field, "use \"-\" for unset"));
                    }
                }
                self.identity = identity.clone();
            }
        }
        Ok(())
    }

    fn node_mut(&mut self, node_id: &str) -> Result<&mut NodeDescriptor, RegistryError> {
        self.nodes.get_mut(node_id).ok_or_else(|| RegistryError::UnknownNode(node_id.to_string()))
    }

    pub fn gps_of(&self, node_id: &str) -> Option<String> {
        self.nodes.get(node_id).map(|n| n.gps.clone())
    }
}
