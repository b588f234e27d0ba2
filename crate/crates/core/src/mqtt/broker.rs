//! Embedded broker used for downlink configuration and alerts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::{sleep_until, timeout, Instant};

use super::codec::{
    connect_code, decode_packet, encode_packet, packet_len, Connect, LastWill, Packet, Publish, QoS,
    SUBACK_FAILURE,
};
use super::topic::{match_topic, TopicFilter, TopicName};

pub type SessionId = u64;

/// Filter → subscribed sessions with their granted QoS.
#[derive(Debug, Default)]
pub struct SubscriptionTable {
    filters: HashMap<TopicFilter, HashMap<SessionId, QoS>>,
}

impl SubscriptionTable {
    pub fn subscribe(&mut self, session: SessionId, filter: TopicFilter, qos: QoS) {
        self.filters.entry(filter).or_default().insert(session, qos);
    }

    pub fn unsubscribe(&mut self, session: SessionId, filter: &TopicFilter) {
        if let Some(set) = self.filters.get_mut(filter) {
            set.remove(&session);
            if set.is_empty() {
                self.filters.remove(filter);
            }
        }
    }

    pub fn remove_session(&mut self, session: SessionId) {
        self.filters.retain(|_, set| {
            set.remove(&session);
            !set.is_empty()
        });
    }

    /// Each matching session appears once, with the highest QoS among its
    /// matching filters.
    pub fn route(&self, topic: &TopicName) -> HashMap<SessionId, QoS> {
        let mut out: HashMap<SessionId, QoS> = HashMap::new();
        for (filter, set) in &self.filters {
            if match_topic(filter, topic) {
                for (&session, &qos) in set {
                    let e = out.entry(session).or_insert(qos);
                    *e = (*e).max(qos);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.filters.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

/// Optional static allowlist of client ids.
#[derive(Debug, Clone, Default)]
pub struct AuthPolicy {
    pub allowed_client_ids: Option<HashSet<String>>,
}

impl AuthPolicy {
    pub fn allow_all() -> Self {
        Self::default()
    }

    fn permits(&self, client_id: &str) -> bool {
        self.allowed_client_ids.as_ref().is_none_or(|set| set.contains(client_id))
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    pub auth: AuthPolicy,
    pub max_packet_size: usize,
    /// Time allowed between accepting a socket and receiving CONNECT.
    pub connect_timeout: Duration,
}

impl BrokerConfig {
    pub fn new(bind: SocketAddr) -> Self {
        BrokerConfig { bind, auth: AuthPolicy::default(), max_packet_size: 1 << 20, connect_timeout: Duration::from_secs(10) }
    }
}

enum Outbound {
    /// Routed publish; the session assigns the packet id.
    Deliver(Publish),
    Close,
}

struct SessionEntry {
    id: SessionId,
    tx: mpsc::UnboundedSender<Outbound>,
}

#[derive(Debug, Default)]
pub struct BrokerStats {
    pub connections: AtomicU64,
    pub publishes_received: AtomicU64,
    pub deliveries: AtomicU64,
}

struct Shared {
    auth: AuthPolicy,
    max_packet_size: usize,
    connect_timeout: Duration,
    subs: RwLock<SubscriptionTable>,
    sessions: Mutex<HashMap<String, SessionEntry>>,
    outbound: RwLock<HashMap<SessionId, mpsc::UnboundedSender<Outbound>>>,
    retained: Mutex<BTreeMap<String, Publish>>,
    observers: Mutex<Vec<mpsc::UnboundedSender<Publish>>>,
    next_session: AtomicU64,
    stats: BrokerStats,
}

impl Shared {
    fn route(&self, publish: &Publish) {
        self.stats.publishes_received.fetch_add(1, Ordering::Relaxed);
        if publish.retain {
            let mut retained = self.retained.lock();
            if publish.payload.is_empty() {
                retained.remove(publish.topic.as_str());
            } else {
                let mut stored = publish.clone();
                stored.dup = false;
                stored.packet_id = None;
                retained.insert(publish.topic.as_str().to_string(), stored);
            }
        }
        self.observers.lock().retain(|tx| tx.send(publish.clone()).is_ok());
        let targets = self.subs.read().route(&publish.topic);
        if targets.is_empty() {
            return;
        }
        let outbound = self.outbound.read();
        for (session, granted) in targets {
            if let Some(tx) = outbound.get(&session) {
                let msg = Publish {
                    dup: false,
                    qos: publish.qos.min(granted),
                    retain: false,
                    topic: publish.topic.clone(),
                    packet_id: None,
                    payload: publish.payload.clone(),
                };
                if tx.send(Outbound::Deliver(msg)).is_ok() {
                    self.stats.deliveries.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }

    fn retained_matching(&self, filter: &TopicFilter) -> Vec<Publish> {
        self.retained
            .lock()
            .values()
            .filter(|p| match_topic(filter, &p.topic))
            .cloned()
            .collect()
    }
}

/// A running embedded broker.
pub struct Broker {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    task: Mutex<Option<JoinHandle<()>>>,
}

/// Binds the broker endpoint and starts accepting sessions.
pub async fn broker_serve(config: BrokerConfig) -> io::Result<Broker> {
    let listener = TcpListener::bind(config.bind).await?;
    let local_addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        auth: config.auth,
        max_packet_size: config.max_packet_size,
        connect_timeout: config.connect_timeout,
        subs: RwLock::new(SubscriptionTable::default()),
        sessions: Mutex::new(HashMap::new()),
        outbound: RwLock::new(HashMap::new()),
        retained: Mutex::new(BTreeMap::new()),
        observers: Mutex::new(Vec::new()),
        next_session: AtomicU64::new(1),
        stats: BrokerStats::default(),
    });
    let (shutdown, shutdown_rx) = watch::channel(false);
    let task = tokio::spawn(accept_loop(listener, shared.clone(), shutdown_rx));
    Ok(Broker { shared, local_addr, shutdown, task: Mutex::new(Some(task)) })
}

impl Broker {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Publishes from inside the gateway process, as if from a connected client.
    pub fn publish(&self, topic: TopicName, payload: impl Into<Vec<u8>>, qos: QoS, retain: bool) {
        let mut p = Publish::new(topic, payload);
        p.qos = qos;
        p.retain = retain;
        self.shared.route(&p);
    }

    /// Every publish the broker accepts, in acceptance order, from now on.
    pub fn observe(&self) -> mpsc::UnboundedReceiver<Publish> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.shared.observers.lock().push(tx);
        rx
    }

    pub fn session_count(&self) -> usize {
        self.shared.sessions.lock().len()
    }

    pub fn retained_count(&self) -> usize {
        self.shared.retained.lock().len()
    }

    pub fn retained(&self, topic: &str) -> Option<Vec<u8>> {
        self.shared.retained.lock().get(topic).map(|p| p.payload.clone())
    }

    pub fn stats(&self) -> &BrokerStats {
        &self.shared.stats
    }

    pub fn is_running(&self) -> bool {
        self.task.lock().as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Stops accepting, drops every session socket and waits for teardown.
    pub async fn shutdown(&self) {
        let _ = self.shutdown.send(true);
        let task = self.task.lock().take();
        if let Some(task) = task {
            let _ = task.await;
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    let mut sessions = JoinSet::new();
    loop {
        tokio::select! {
            _ = shutdown.changed() => break,
            Some(_) = sessions.join_next(), if !sessions.is_empty() => {}
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
                    sessions.spawn(run_session(stream, peer, shared.clone()));
                }
                Err(e) => log::warn!("broker accept failed: {e}"),
            },
        }
    }
    drop(listener);
    sessions.shutdown().await;
    shared.sessions.lock().clear();
    shared.outbound.write().clear();
    *shared.subs.write() = SubscriptionTable::default();
}

/// Why a session ended; decides whether the will is published.
enum End {
    Clean,
    Abnormal,
}

struct Conn {
    stream: TcpStream,
    buf: Vec<u8>,
    max_packet_size: usize,
}

impl Conn {
    async fn write(&mut self, packet: &Packet) -> io::Result<()> {
        let bytes = encode_packet(packet).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        self.stream.write_all(&bytes).await
    }

    /// Pulls one complete packet out of the buffer, if there is one.
    fn take_packet(&mut self) -> io::Result<Option<Packet>> {
        let invalid = |e: String| io::Error::new(io::ErrorKind::InvalidData, e);
        if let Some(len) = packet_len(&self.buf).map_err(|e| invalid(e.to_string()))? {
            if len > self.max_packet_size {
                return Err(invalid(format!("packet of {len} bytes exceeds limit")));
            }
        }
        match decode_packet(&self.buf).map_err(|e| invalid(e.to_string()))? {
            Some((packet, used)) => {
                self.buf.drain(..used);
                Ok(Some(packet))
            }
            None => Ok(None),
        }
    }

    async fn read_more(&mut self) -> io::Result<()> {
        let mut tmp = [0u8; 4096];
        let n = self.stream.read(&mut tmp).await?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        self.buf.extend_from_slice(&tmp[..n]);
        Ok(())
    }
}

async fn read_connect(conn: &mut Conn) -> io::Result<Connect> {
    loop {
        if let Some(packet) = conn.take_packet()? {
            return match packet {
                Packet::Connect(c) => Ok(c),
                _ => Err(io::Error::new(io::ErrorKind::InvalidData, "first packet is not CONNECT")),
            };
        }
        conn.read_more().await?;
    }
}

async fn run_session(stream: TcpStream, peer: SocketAddr, shared: Arc<Shared>) {
    let mut conn = Conn { stream, buf: Vec::new(), max_packet_size: shared.max_packet_size };
    let connect = match timeout(shared.connect_timeout, read_connect(&mut conn)).await {
        Ok(Ok(c)) => c,
        Ok(Err(e)) => {
            log::debug!("broker: {peer} failed before CONNECT: {e}");
            return;
        }
        Err(_) => return,
    };
    let code = if connect.client_id.is_empty() || connect.client_id.len() > 23 {
        connect_code::IDENTIFIER_REJECTED
    } else if !shared.auth.permits(&connect.client_id) {
        connect_code::NOT_AUTHORIZED
    } else {
        connect_code::ACCEPTED
    };
    if conn.write(&Packet::ConnAck { session_present: false, code }).await.is_err() || code != connect_code::ACCEPTED {
        return;
    }

    let id = shared.next_session.fetch_add(1, Ordering::Relaxed);
    let (tx, mut rx) = mpsc::unbounded_channel();
    shared.outbound.write().insert(id, tx.clone());
    if let Some(old) = shared.sessions.lock().insert(connect.client_id.clone(), SessionEntry { id, tx }) {
        log::debug!("broker: session takeover for {}", connect.client_id);
        let _ = old.tx.send(Outbound::Close);
    }

    let end = session_loop(&mut conn, &connect, id, &shared, &mut rx).await;

    shared.subs.write().remove_session(id);
    shared.outbound.write().remove(&id);
    {
        let mut sessions = shared.sessions.lock();
        if sessions.get(&connect.client_id).is_some_and(|e| e.id == id) {
            sessions.remove(&connect.client_id);
        }
    }
    if let (End::Abnormal, Some(will)) = (end, connect.will) {
        let LastWill { topic, payload, qos, retain } = will;
        let mut p = Publish::new(topic, payload);
        p.qos = qos;
        p.retain = retain;
        shared.route(&p);
    }
}

async fn session_loop(
    conn: &mut Conn,
    connect: &Connect,
    id: SessionId,
    shared: &Shared,
    rx: &mut mpsc::UnboundedReceiver<Outbound>,
) -> End {
    // A client that stays silent for 1.5x its keep-alive is dropped.
    let grace = (connect.keep_alive > 0).then(|| Duration::from_millis(connect.keep_alive as u64 * 1500));
    let mut deadline = grace.map(|g| Instant::now() + g);
    let mut next_packet_id: u16 = 0;
    loop {
        // Drain whatever is already buffered before waiting again.
        loop {
            let packet = match conn.take_packet() {
                Ok(Some(p)) => p,
                Ok(None) => break,
                Err(e) => {
                    log::debug!("broker: session {} protocol error: {e}", connect.client_id);
                    return End::Abnormal;
                }
            };
            if let Some(g) = grace {
                deadline = Some(Instant::now() + g);
            }
            let reply = match packet {
                Packet::Publish(p) => {
                    let ack = p.packet_id.map(|packet_id| Packet::PubAck { packet_id });
                    shared.route(&p);
                    ack
                }
                Packet::PubAck { .. } => None,
                Packet::Subscribe { packet_id, filters } => {
                    let mut codes = Vec::with_capacity(filters.len());
                    // One retained copy per topic even when several filters match it.
                    let mut retained: BTreeMap<String, Publish> = BTreeMap::new();
                    {
                        let mut subs = shared.subs.write();
                        for (filter, qos) in &filters {
                            subs.subscribe(id, filter.clone(), *qos);
                            codes.push(*qos as u8);
                        }
                    }
                    for (filter, qos) in &filters {
                        for mut p in shared.retained_matching(filter) {
                            p.qos = p.qos.min(*qos);
                            let slot = retained.entry(p.topic.as_str().to_string()).or_insert_with(|| p.clone());
                            slot.qos = slot.qos.max(p.qos);
                        }
                    }
                    debug_assert!(!codes.contains(&SUBACK_FAILURE));
                    if conn.write(&Packet::SubAck { packet_id, codes }).await.is_err() {
                        return End::Abnormal;
                    }
                    for p in retained.into_values() {
                        if deliver(conn, p, &mut next_packet_id).await.is_err() {
                            return End::Abnormal;
                        }
                    }
                    None
                }
                Packet::Unsubscribe { packet_id, filters } => {
                    let mut subs = shared.subs.write();
                    for f in &filters {
                        subs.unsubscribe(id, f);
                    }
                    Some(Packet::UnsubAck { packet_id })
                }
                Packet::PingReq => Some(Packet::PingResp),
                Packet::Disconnect => return End::Clean,
                other => {
                    log::debug!("broker: unexpected {other:?} from {}", connect.client_id);
                    return End::Abnormal;
                }
            };
            if let Some(reply) = reply {
                if conn.write(&reply).await.is_err() {
                    return End::Abnormal;
                }
            }
        }

        let keepalive = async {
            match deadline {
                Some(d) => sleep_until(d).await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            r = conn.read_more() => if r.is_err() { return End::Abnormal },
            msg = rx.recv() => match msg {
                Some(Outbound::Deliver(p)) => if deliver(conn, p, &mut next_packet_id).await.is_err() {
                    return End::Abnormal;
                },
                Some(Outbound::Close) | None => return End::Clean,
            },
            _ = keepalive => {
                log::debug!("broker: keep-alive expired for {}", connect.client_id);
                return End::Abnormal;
            }
        }
    }
}

async fn deliver(conn: &mut Conn, mut p: Publish, next_id: &mut u16) -> io::Result<()> {
    if p.qos == QoS::AtLeastOnce {
        *next_id = next_id.checked_add(1).unwrap_or(1);
        p.packet_id = Some(*next_id);
    } else {
        p.packet_id = None;
    }
    conn.write(&Packet::Publish(p)).await
}
