//! MQTT clients: a plain connection used by nodes and tests, and the
//! buffering uplink publisher that forwards records to the upstream broker.

use std::collections::VecDeque;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::{oneshot, Notify};
use tokio::task::JoinHandle;
use tokio::time::{interval_at, sleep, timeout, Instant, MissedTickBehavior};

use super::codec::{
    connect_code, decode_packet, encode_packet, Connect, DecodeError, EncodeError, Packet, Publish, QoS,
};
use super::topic::{TopicFilter, TopicName};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("connection refused by broker, code {0}")]
    Refused(u8),
    #[error("connection closed")]
    Closed,
    #[error("unexpected packet {0:?}")]
    Unexpected(Box<Packet>),
    #[error("timed out")]
    Timeout,
}

/// A single MQTT connection with request/response helpers. Packets that
/// arrive while waiting for an acknowledgement are queued for `recv`.
pub struct MqttConnection {
    stream: TcpStream,
    buf: Vec<u8>,
    pending: VecDeque<Packet>,
    next_id: u16,
}

impl MqttConnection {
    /// Opens the socket and performs the CONNECT/CONNACK exchange.
    pub async fn connect(addr: impl ToSocketAddrs, connect: Connect) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        let _ = stream.set_nodelay(true);
        let mut conn = MqttConnection { stream, buf: Vec::new(), pending: VecDeque::new(), next_id: 0 };
        conn.send(&Packet::Connect(connect)).await?;
        match conn.read_packet().await? {
            Packet::ConnAck { code: connect_code::ACCEPTED, .. } => Ok(conn),
            Packet::ConnAck { code, .. } => Err(ClientError::Refused(code)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub async fn send(&mut self, packet: &Packet) -> Result<(), ClientError> {
        let bytes = encode_packet(packet)?;
        self.stream.write_all(&bytes).await?;
        Ok(())
    }

    async fn read_packet(&mut self) -> Result<Packet, ClientError> {
        loop {
            if let Some((packet, used)) = decode_packet(&self.buf)? {
                self.buf.drain(..used);
                return Ok(packet);
            }
            let mut tmp = [0u8; 4096];
            let n = self.stream.read(&mut tmp).await?;
            if n == 0 {
                return Err(ClientError::Closed);
            }
            self.buf.extend_from_slice(&tmp[..n]);
        }
    }

    /// Next packet from the broker, queued ones first.
    pub async fn recv(&mut self) -> Result<Packet, ClientError> {
        match self.pending.pop_front() {
            Some(p) => Ok(p),
            None => self.read_packet().await,
        }
    }

    fn packet_id(&mut self) -> u16 {
        self.next_id = self.next_id.checked_add(1).unwrap_or(1);
        self.next_id
    }

    async fn await_ack(&mut self, is_ack: impl Fn(&Packet) -> bool) -> Result<Packet, ClientError> {
        loop {
            let p = self.read_packet().await?;
            if is_ack(&p) {
                return Ok(p);
            }
            self.pending.push_back(p);
        }
    }

    /// Subscribes and returns the SUBACK codes.
    pub async fn subscribe(&mut self, filter: TopicFilter, qos: QoS) -> Result<Vec<u8>, ClientError> {
        let packet_id = self.packet_id();
        self.send(&Packet::Subscribe { packet_id, filters: vec![(filter, qos)] }).await?;
        match self.await_ack(|p| matches!(p, Packet::SubAck { packet_id: id, .. } if *id == packet_id)).await? {
            Packet::SubAck { codes, .. } => Ok(codes),
            _ => unreachable!(),
        }
    }

    /// Publishes; QoS 1 returns once the PUBACK arrives.
    pub async fn publish(
        &mut self,
        topic: TopicName,
        payload: impl Into<Vec<u8>>,
        qos: QoS,
        retain: bool,
    ) -> Result<Option<u16>, ClientError> {
        let mut p = Publish::new(topic, payload);
        p.qos = qos;
        p.retain = retain;
        if qos == QoS::AtLeastOnce {
            p.packet_id = Some(self.packet_id());
        }
        let id = p.packet_id;
        self.send(&Packet::Publish(p)).await?;
        if let Some(packet_id) = id {
            self.await_ack(|p| matches!(p, Packet::PubAck { packet_id: got } if *got == packet_id)).await?;
        }
        Ok(id)
    }

    /// Waits for the next PUBLISH, acknowledging QoS 1 deliveries and
    /// skipping other control packets.
    pub async fn next_publish(&mut self) -> Result<Publish, ClientError> {
        loop {
            if let Packet::Publish(p) = self.recv().await? {
                if let Some(packet_id) = p.packet_id {
                    self.send(&Packet::PubAck { packet_id }).await?;
                }
                return Ok(p);
            }
        }
    }

    pub async fn disconnect(mut self) -> Result<(), ClientError> {
        self.send(&Packet::Disconnect).await?;
        let _ = self.stream.shutdown().await;
        Ok(())
    }
}

/// Exponential reconnect delay with symmetric jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
    /// Fractional jitter, 0.2 means ±20%.
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { initial: Duration::from_secs(1), max: Duration::from_secs(60), jitter: 0.2 }
    }
}

impl Backoff {
    /// Nominal delay before retry number `attempt` (0-based), without jitter.
    pub fn nominal(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.min(31));
        self.initial.saturating_mul(factor).min(self.max)
    }

    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.nominal(attempt).as_secs_f64();
        let j = if self.jitter > 0.0 { rng.random_range(-self.jitter..=self.jitter) } else { 0.0 };
        Duration::from_secs_f64(nominal * (1.0 + j))
    }
}

#[derive(Debug, Clone)]
pub struct UplinkConfig {
    /// `host:port` of the upstream broker.
    pub upstream: String,
    pub client_id: String,
    pub qos: QoS,
    pub buffer_cap: usize,
    pub keep_alive: u16,
    pub backoff: Backoff,
    pub connect_timeout: Duration,
}

impl UplinkConfig {
    pub fn new(upstream: impl Into<String>) -> Self {
        UplinkConfig {
            upstream: upstream.into(),
            client_id: "piico-gateway".into(),
            qos: QoS::AtMostOnce,
            buffer_cap: 10_000,
            keep_alive: 30,
            backoff: Backoff::default(),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UplinkStatus {
    Connecting,
    Connected,
    Buffering,
    Closed,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UplinkError {
    #[error("uplink is permanently closed")]
    PermanentlyClosed,
    #[error("message dropped from a full buffer")]
    Dropped,
}

/// Confirmation that a message left the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivered {
    pub packet_id: Option<u16>,
}

/// Handle returned by [`UplinkClient::publish`].
#[derive(Debug)]
pub struct PublishReceipt {
    /// The upstream was not connected when the message was queued.
    pub queued_offline: bool,
    /// The buffer was full and its oldest message was dropped.
    pub dropped_oldest: bool,
    rx: oneshot::Receiver<Delivered>,
}

impl PublishReceipt {
    /// Resolves once the message was written (QoS 0) or acknowledged (QoS 1).
    pub async fn delivered(self) -> Result<Delivered, UplinkError> {
        self.rx.await.map_err(|_| UplinkError::Dropped)
    }
}

struct Pending {
    topic: TopicName,
    payload: Vec<u8>,
    qos: QoS,
    sent_before: bool,
    done: Option<oneshot::Sender<Delivered>>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct UplinkSnapshot {
    pub status: UplinkStatus,
    pub buffer_depth: usize,
    pub enqueued: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub reconnects: u64,
}

struct UplinkShared {
    cap: usize,
    queue: Mutex<VecDeque<Pending>>,
    status: Mutex<UplinkStatus>,
    wake: Notify,
    closing: AtomicBool,
    enqueued: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
    reconnects: AtomicU64,
}

impl UplinkShared {
    fn set_status(&self, s: UplinkStatus) {
        *self.status.lock() = s;
    }

    fn complete_front(&self, packet_id: Option<u16>) {
        if let Some(mut p) = self.queue.lock().pop_front() {
            self.delivered.fetch_add(1, Ordering::Relaxed);
            if let Some(done) = p.done.take() {
                let _ = done.send(Delivered { packet_id });
            }
        }
    }
}

/// Publisher towards the upstream broker. Messages are buffered FIFO while
/// the broker is unreachable and flushed in order once it returns.
pub struct UplinkClient {
    shared: Arc<UplinkShared>,
    qos: QoS,
    task: Mutex<Option<JoinHandle<()>>>,
}

impl UplinkClient {
    pub fn start(config: UplinkConfig) -> Self {
        let shared = Arc::new(UplinkShared {
            cap: config.buffer_cap.max(1),
            queue: Mutex::new(VecDeque::new()),
            status: Mutex::new(UplinkStatus::Connecting),
            wake: Notify::new(),
            closing: AtomicBool::new(false),
            enqueued: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            reconnects: AtomicU64::new(0),
        });
        let qos = config.qos;
        let task = tokio::spawn(drive(config, shared.clone()));
        UplinkClient { shared, qos, task: Mutex::new(Some(task)) }
    }

    /// Queues a message with the configured QoS.
    pub fn publish(&self, topic: TopicName, payload: Vec<u8>) -> Result<PublishReceipt, UplinkError> {
        self.publish_with(topic, payload, self.qos)
    }

    pub fn publish_with(&self, topic: TopicName, payload: Vec<u8>, qos: QoS) -> Result<PublishReceipt, UplinkError> {
        if self.shared.closing.load(Ordering::SeqCst) {
            return Err(UplinkError::PermanentlyClosed);
        }
        let (tx, rx) = oneshot::channel();
        let mut dropped_oldest = false;
        {
            let mut q = self.shared.queue.lock();
            q.push_back(Pending { topic, payload, qos, sent_before: false, done: Some(tx) });
            // Never evict a message already on the wire awaiting its ack.
            while q.len() > self.shared.cap {
                let victim = if q.front().is_some_and(|p| p.sent_before) { 1 } else { 0 };
                q.remove(victim);
                self.shared.dropped.fetch_add(1, Ordering::Relaxed);
                dropped_oldest = true;
            }
        }
        self.shared.enqueued.fetch_add(1, Ordering::Relaxed);
        self.shared.wake.notify_one();
        let queued_offline = self.status() != UplinkStatus::Connected;
        Ok(PublishReceipt { queued_offline, dropped_oldest, rx })
    }

    pub fn status(&self) -> UplinkStatus {
        *self.shared.status.lock()
    }

    pub fn buffer_depth(&self) -> usize {
        self.shared.queue.lock().len()
    }

    pub fn snapshot(&self) -> UplinkSnapshot {
        UplinkSnapshot {
            status: self.status(),
            buffer_depth: self.buffer_depth(),
            enqueued: self.shared.enqueued.load(Ordering::Relaxed),
            delivered: self.shared.delivered.load(Ordering::Relaxed),
            dropped: self.shared.dropped.load(Ordering::Relaxed),
            reconnects: self.shared.reconnects.load(Ordering::Relaxed),
        }
    }

    /// Stops accepting messages and tries to flush the buffer for up to
    /// `flush_timeout`. Returns the number of messages left undelivered.
    pub async fn close(&self, flush_timeout: Duration) -> usize {
        self.shared.closing.store(true, Ordering::SeqCst);
        self.shared.wake.notify_one();
        let task = self.task.lock().take();
        if let Some(mut task) = task {
            if timeout(flush_timeout, &mut task).await.is_err() {
                task.abort();
            }
        }
        self.shared.set_status(UplinkStatus::Closed);
        self.buffer_depth()
    }
}

impl Drop for UplinkClient {
    fn drop(&mut self) {
        if let Some(task) = self.task.lock().take() {
            task.abort();
        }
    }
}

fn drained(shared: &UplinkShared) -> bool {
    shared.closing.load(Ordering::SeqCst) && shared.queue.lock().is_empty()
}

async fn drive(config: UplinkConfig, shared: Arc<UplinkShared>) {
    let mut rng = rand::rngs::StdRng::from_os_rng();
    let mut attempt: u32 = 0;
    let mut ever_connected = false;
    loop {
        if drained(&shared) {
            break;
        }
        let mut connect = Connect::new(config.client_id.clone(), config.keep_alive);
        connect.clean_session = true;
        let conn = timeout(config.connect_timeout, MqttConnection::connect(config.upstream.as_str(), connect)).await;
        match conn {
            Ok(Ok(conn)) => {
                attempt = 0;
                if ever_connected {
                    shared.reconnects.fetch_add(1, Ordering::Relaxed);
                }
                ever_connected = true;
                shared.set_status(UplinkStatus::Connected);
                log::info!("uplink connected to {}", config.upstream);
                let finished = run_connected(conn, &config, &shared).await;
                if finished {
                    break;
                }
                log::warn!("uplink to {} lost, buffering", config.upstream);
                shared.set_status(UplinkStatus::Buffering);
            }
            Ok(Err(e)) => {
                log::debug!("uplink connect to {} failed: {e}", config.upstream);
                shared.set_status(if ever_connected { UplinkStatus::Buffering } else { UplinkStatus::Connecting });
                let d = config.backoff.delay(attempt, &mut rng);
                attempt = attempt.saturating_add(1);
                sleep(d).await;
            }
            Err(_) => {
                shared.set_status(if ever_connected { UplinkStatus::Buffering } else { UplinkStatus::Connecting });
                let d = config.backoff.delay(attempt, &mut rng);
                attempt = attempt.saturating_add(1);
                sleep(d).await;
            }
        }
    }
    shared.set_status(UplinkStatus::Closed);
}

/// Runs one connected session. Returns true when the client is closing and
/// the buffer has been flushed.
async fn run_connected(conn: MqttConnection, config: &UplinkConfig, shared: &UplinkShared) -> bool {
    let MqttConnection { stream, mut buf, mut next_id, .. } = conn;
    let (mut reader, mut writer) = stream.into_split();
    let mut in_flight: Option<u16> = None;
    let ping_every = Duration::from_secs(config.keep_alive.max(1) as u64);
    let mut ping = interval_at(Instant::now() + ping_every, ping_every);
    ping.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut tmp = vec![0u8; 4096];
    loop {
        // Put as much of the queue on the wire as ordering allows.
        while in_flight.is_none() {
            let next = {
                let mut q = shared.queue.lock();
                q.front_mut().map(|p| {
                    let mut publish = Publish::new(p.topic.clone(), p.payload.clone());
                    publish.qos = p.qos;
                    publish.dup = p.sent_before && p.qos == QoS::AtLeastOnce;
                    p.sent_before = true;
                    publish
                })
            };
            let Some(mut publish) = next else { break };
            if publish.qos == QoS::AtLeastOnce {
                next_id = next_id.checked_add(1).unwrap_or(1);
                publish.packet_id = Some(next_id);
            }
            let bytes = match encode_packet(&Packet::Publish(publish.clone())) {
                Ok(b) => b,
                Err(e) => {
                    log::error!("uplink dropping unencodable message: {e}");
                    shared.queue.lock().pop_front();
                    shared.dropped.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
            };
            if writer.write_all(&bytes).await.is_err() {
                return false;
            }
            match publish.packet_id {
                Some(id) => in_flight = Some(id),
                None => shared.complete_front(None),
            }
        }
        if in_flight.is_none() && drained(shared) {
            let _ = writer.write_all(&[0xE0, 0x00]).await;
            let _ = writer.shutdown().await;
            return true;
        }

        tokio::select! {
            r = reader.read(&mut tmp) => {
                let n = match r {
                    Ok(0) | Err(_) => return false,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&tmp[..n]);
                loop {
                    match decode_packet(&buf) {
                        Ok(Some((packet, used))) => {
                            buf.drain(..used);
                            if let Packet::PubAck { packet_id } = packet {
                                if in_flight == Some(packet_id) {
                                    in_flight = None;
                                    shared.complete_front(Some(packet_id));
                                }
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!("uplink received malformed packet: {e}");
                            return false;
                        }
                    }
                }
            }
            _ = shared.wake.notified(), if in_flight.is_none() => {}
            _ = ping.tick() => {
                if writer.write_all(&[0xC0, 0x00]).await.is_err() {
                    return false;
                }
            }
        }
    }
}
