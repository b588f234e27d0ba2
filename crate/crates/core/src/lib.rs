//! Multiprotocol IoT gateway.
//!
//! Sensor nodes talk to the gateway over three emulated radio links (wifi,
//! bluetooth, zigbee). Every reading is normalized into a nine-field JSON
//! record, published upstream over MQTT, and kept in a short in-memory window
//! for the operator API. Configuration flows back to the nodes as retained
//! messages on an embedded broker.

pub mod daemon;
pub mod link;
pub mod metrics;
pub mod mqtt;
pub mod normalizer;
pub mod protocol;
pub mod registry;
pub mod sim;

pub use protocol::ProtocolId;
