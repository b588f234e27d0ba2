#![allow(dead_code)]

use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gateway_core::daemon::GatewayConfig;
use gateway_core::metrics::{ProviderError, ResourceProvider, ResourceReading};
use gateway_core::mqtt::codec::{decode_packet, encode_packet};
use gateway_core::mqtt::{broker_serve, Broker, BrokerConfig, Packet, Publish};
use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::task::JoinHandle;

pub const LOCALHOST: Ipv4Addr = Ipv4Addr::LOCALHOST;

pub fn local(port: u16) -> SocketAddr {
    SocketAddr::new(LOCALHOST.into(), port)
}

/// An upstream broker standing in for the cloud, recording every publish it accepts.
pub struct Sink {
    pub broker: Broker,
    pub received: Arc<Mutex<Vec<Publish>>>,
    collector: JoinHandle<()>,
}

impl Sink {
    pub async fn start(addr: SocketAddr) -> Sink {
        Self::start_into(addr, Arc::new(Mutex::new(Vec::new()))).await
    }

    /// Rebinds `addr` (retrying while the old socket lingers) and appends to `received`.
    pub async fn start_into(addr: SocketAddr, received: Arc<Mutex<Vec<Publish>>>) -> Sink {
        let deadline = Instant::now() + Duration::from_secs(5);
        let broker = loop {
            match broker_serve(BrokerConfig::new(addr)).await {
                Ok(b) => break b,
                Err(e) if Instant::now() < deadline => {
                    let _ = e;
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
                Err(e) => panic!("sink bind {addr}: {e}"),
            }
        };
        let mut rx = broker.observe();
        let sink = received.clone();
        let collector = tokio::spawn(async move {
            while let Some(p) = rx.recv().await {
                sink.lock().push(p);
            }
        });
        Sink { broker, received, collector }
    }

    pub fn addr(&self) -> SocketAddr {
        self.broker.local_addr()
    }

    pub fn count(&self) -> usize {
        self.received.lock().len()
    }

    pub async fn stop(self) {
        self.broker.shutdown().await;
        self.collector.abort();
    }
}

pub fn gateway_config(dir: &Path, upstream: SocketAddr, qos: u8) -> GatewayConfig {
    let mut c = GatewayConfig::default();
    c.bind_host = LOCALHOST.into();
    c.ports.wifi = 0;
    c.ports.bluetooth = 0;
    c.ports.zigbee = 0;
    c.ports.broker = 0;
    c.ports.api = 0;
    c.upstream.address = upstream.to_string();
    c.upstream.qos = qos;
    c.state_file = dir.join("state.json");
    c
}

/// Returns the same reading every time.
pub struct FixedProvider {
    pub cpu_pct: f64,
    pub free: u64,
    pub total: u64,
}

impl ResourceProvider for FixedProvider {
    fn read(&mut self) -> Result<ResourceReading, ProviderError> {
        Ok(ResourceReading { cpu_pct: self.cpu_pct, ram_free_bytes: self.free, ram_total_bytes: self.total })
    }
}

pub async fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// A hand-driven MQTT session for transcript tests.
pub struct RawSession {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl RawSession {
    pub async fn connect(addr: SocketAddr) -> RawSession {
        let stream = TcpStream::connect(addr).await.expect("connect");
        stream.set_nodelay(true).unwrap();
        RawSession { stream, buf: Vec::new() }
    }

    pub async fn send(&mut self, p: &Packet) {
        let bytes = encode_packet(p).expect("encode");
        self.stream.write_all(&bytes).await.expect("write");
    }

    /// Next packet, `None` on timeout. Panics if the peer closed.
    pub async fn recv(&mut self, timeout: Duration) -> Option<Packet> {
        match self.next(timeout).await {
            Next::Packet(p) => Some(p),
            Next::Timeout => None,
            Next::Closed => panic!("peer closed the session"),
        }
    }

    pub async fn next(&mut self, timeout: Duration) -> Next {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some((p, used)) = decode_packet(&self.buf).expect("decode") {
                self.buf.drain(..used);
                return Next::Packet(p);
            }
            let mut chunk = [0u8; 4096];
            match tokio::time::timeout_at(deadline, self.stream.read(&mut chunk)).await {
                Err(_) => return Next::Timeout,
                Ok(Ok(0)) | Ok(Err(_)) => return Next::Closed,
                Ok(Ok(n)) => self.buf.extend_from_slice(&chunk[..n]),
            }
        }
    }
}

#[derive(Debug, PartialEq)]
pub enum Next {
    Packet(Packet),
    Timeout,
    Closed,
}

/// Request against a running API; returns status and parsed JSON body.
pub async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&serde_json::Value>) -> (u16, serde_json::Value) {
    let client = reqwest::Client::new();
    let url = format!("http://{addr}{path}");
    let mut req = client.request(method.parse().unwrap(), url);
    if let Some(b) = body {
        req = req.json(b);
    }
    let resp = req.send().await.expect("http request");
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap_or_default();
    let value = if text.is_empty() { serde_json::Value::Null } else { serde_json::from_str(&text).unwrap_or(serde_json::Value::String(text)) };
    (status, value)
}
