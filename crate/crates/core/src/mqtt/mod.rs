//! MQTT 3.1.1 subset: packet codec, topic matching, the embedded broker and
//! the uplink publisher.

pub mod broker;
pub mod client;
pub mod codec;
pub mod topic;

pub use broker::{broker_serve, AuthPolicy, Broker, BrokerConfig, SubscriptionTable};
pub use client::{
    Backoff, ClientError, Delivered, MqttConnection, PublishReceipt, UplinkClient, UplinkConfig, UplinkError,
    UplinkSnapshot, UplinkStatus,
};
pub use codec::{decode_packet, encode_packet, Connect, DecodeError, EncodeError, Packet, Publish, QoS};
pub use topic::{match_topic, TopicError, TopicFilter, TopicName};
