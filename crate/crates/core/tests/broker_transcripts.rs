mod common;

use std::time::Duration;

use common::*;
use gateway_core::mqtt::codec::LastWill;
use gateway_core::mqtt::{broker_serve, Broker, BrokerConfig, Connect, Packet, Publish, QoS, TopicFilter, TopicName};

const T: Duration = Duration::from_millis(500);

async fn broker() -> Broker {
    broker_serve(BrokerConfig::new(local(0))).await.unwrap()
}

async fn connect_with(b: &Broker, c: Connect) -> RawSession {
    let mut s = RawSession::connect(b.local_addr()).await;
    s.send(&Packet::Connect(c)).await;
    assert_eq!(s.recv(T).await, Some(Packet::ConnAck { session_present: false, code: 0 }));
    s
}

async fn connect(b: &Broker, id: &str) -> RawSession {
    connect_with(b, Connect::new(id, 0)).await
}

fn filter(s: &str) -> TopicFilter {
    TopicFilter::new(s).unwrap()
}

fn topic(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

async fn subscribe(s: &mut RawSession, packet_id: u16, f: &str, qos: QoS) {
    s.send(&Packet::Subscribe { packet_id, filters: vec![(filter(f), qos)] }).await;
    assert_eq!(s.recv(T).await, Some(Packet::SubAck { packet_id, codes: vec![qos as u8] }));
}

async fn ping(s: &mut RawSession) {
    s.send(&Packet::PingReq).await;
    assert_eq!(s.recv(T).await, Some(Packet::PingResp));
}

#[tokio::test]
async fn qos_is_downgraded_to_the_grant() {
    let b = broker().await;
    let mut sub = connect(&b, "sub").await;
    subscribe(&mut sub, 1, "piico/#", QoS::AtMostOnce).await;
    let mut publisher = connect(&b, "pub").await;
    let mut p = Publish::new(topic("piico/-/-/nodo1/Humidity"), b"48.2".to_vec());
    p.qos = QoS::AtLeastOnce;
    p.packet_id = Some(300);
    publisher.send(&Packet::Publish(p)).await;
    assert_eq!(publisher.recv(T).await, Some(Packet::PubAck { packet_id: 300 }));
    let want = Publish::new(topic("piico/-/-/nodo1/Humidity"), b"48.2".to_vec());
    assert_eq!(sub.recv(T).await, Some(Packet::Publish(want)));
    b.shutdown().await;
}

#[tokio::test]
async fn unsubscribe_stops_delivery() {
    let b = broker().await;
    let mut sub = connect(&b, "sub").await;
    subscribe(&mut sub, 1, "a/+", QoS::AtMostOnce).await;
    sub.send(&Packet::Unsubscribe { packet_id: 2, filters: vec![filter("a/+")] }).await;
    assert_eq!(sub.recv(T).await, Some(Packet::UnsubAck { packet_id: 2 }));
    b.publish(topic("a/b"), b"x".to_vec(), QoS::AtMostOnce, false);
    ping(&mut sub).await;
    b.shutdown().await;
}

#[tokio::test]
async fn non_matching_topics_are_not_delivered() {
    let b = broker().await;
    let mut sub = connect(&b, "sub").await;
    subscribe(&mut sub, 1, "piico/cfg/nodo1", QoS::AtLeastOnce).await;
    for t in ["piico/cfg/nodo2", "piico/cfg", "piico/cfg/nodo1/x", "$SYS/piico/cfg/nodo1"] {
        b.publish(topic(t), b"x".to_vec(), QoS::AtMostOnce, false);
    }
    ping(&mut sub).await;
    b.shutdown().await;
}

#[tokio::test]
async fn wildcard_does_not_match_dollar_topics() {
    let b = broker().await;
    let mut sub = connect(&b, "sub").await;
    subscribe(&mut sub, 1, "#", QoS::AtMostOnce).await;
    b.publish(topic("$SYS/uptime"), b"1".to_vec(), QoS::AtMostOnce, false);
    ping(&mut sub).await;
    b.shutdown().await;
}

#[tokio::test]
async fn second_connect_with_same_id_takes_over() {
    let b = broker().await;
    let mut first = connect(&b, "nodo1").await;
    let _second = connect(&b, "nodo1").await;
    assert_eq!(first.next(Duration::from_secs(2)).await, Next::Closed);
    b.shutdown().await;
}

#[tokio::test]
async fn will_is_published_on_abnormal_close_only() {
    let b = broker().await;
    let mut watcher = connect(&b, "watcher").await;
    subscribe(&mut watcher, 1, "piico/status/+", QoS::AtMostOnce).await;

    let will = |id: &str| {
        let mut c = Connect::new(id, 0);
        c.will = Some(LastWill { topic: topic(&format!("piico/status/{id}")), payload: b"offline".to_vec(), qos: QoS::AtMostOnce, retain: false });
        c
    };
    let mut polite = connect_with(&b, will("polite")).await;
    polite.send(&Packet::Disconnect).await;
    drop(polite);
    let rude = connect_with(&b, will("rude")).await;
    drop(rude);

    let got = watcher.recv(Duration::from_secs(2)).await;
    assert_eq!(got, Some(Packet::Publish(Publish::new(topic("piico/status/rude"), b"offline".to_vec()))));
    ping(&mut watcher).await;
    b.shutdown().await;
}

#[tokio::test]
async fn first_packet_must_be_connect() {
    let b = broker().await;
    let mut s = RawSession::connect(b.local_addr()).await;
    s.send(&Packet::PingReq).await;
    assert_eq!(s.next(Duration::from_secs(2)).await, Next::Closed);
    b.shutdown().await;
}

#[tokio::test]
async fn empty_client_id_is_rejected() {
    let b = broker().await;
    let mut s = RawSession::connect(b.local_addr()).await;
    s.send(&Packet::Connect(Connect::new("", 0))).await;
    assert_eq!(s.recv(T).await, Some(Packet::ConnAck { session_present: false, code: 2 }));
    assert_eq!(s.next(Duration::from_secs(2)).await, Next::Closed);
    b.shutdown().await;
}

#[tokio::test]
async fn retained_is_replaced_and_counted() {
    let b = broker().await;
    b.publish(topic("piico/cfg/nodo1"), b"v1".to_vec(), QoS::AtLeastOnce, true);
    b.publish(topic("piico/cfg/nodo1"), b"v2".to_vec(), QoS::AtLeastOnce, true);
    b.publish(topic("piico/cfg/nodo2"), b"w".to_vec(), QoS::AtLeastOnce, true);
    assert_eq!(b.retained_count(), 2);
    assert_eq!(b.retained("piico/cfg/nodo1").as_deref(), Some(&b"v2"[..]));

    let mut sub = connect(&b, "n").await;
    // Two filters matching the same retained topic yield one copy.
    sub.send(&Packet::Subscribe {
        packet_id: 4,
        filters: vec![(filter("piico/cfg/nodo1"), QoS::AtMostOnce), (filter("piico/cfg/+"), QoS::AtMostOnce)],
    })
    .await;
    assert_eq!(sub.recv(T).await, Some(Packet::SubAck { packet_id: 4, codes: vec![0, 0] }));
    let mut got = Vec::new();
    for _ in 0..2 {
        match sub.recv(T).await {
            Some(Packet::Publish(p)) => got.push((p.topic.as_str().to_string(), p.payload, p.retain)),
            other => panic!("{other:?}"),
        }
    }
    got.sort();
    assert_eq!(
        got,
        [("piico/cfg/nodo1".to_string(), b"v2".to_vec(), true), ("piico/cfg/nodo2".to_string(), b"w".to_vec(), true)]
    );
    ping(&mut sub).await;
    b.shutdown().await;
}
