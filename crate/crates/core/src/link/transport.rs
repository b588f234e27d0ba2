use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::SystemTime;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use super::frame::{decode_frame, encode_frame, FrameError, LinkFrame, StreamDecoder, StreamItem};
use crate::protocol::ProtocolId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Stream,
    Datagram,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkEndpoint {
    pub protocol: ProtocolId,
    pub bind_address: SocketAddr,
    pub transport_kind: TransportKind,
}

impl LinkEndpoint {
    /// Zigbee maps onto datagrams, everything else onto streams.
    pub fn new(protocol: ProtocolId, bind_address: SocketAddr) -> Self {
        let transport_kind = match protocol {
            ProtocolId::Zigbee => TransportKind::Datagram,
            _ => TransportKind::Stream,
        };
        LinkEndpoint { protocol, bind_address, transport_kind }
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("cannot bind {protocol} link on {addr}: {source}")]
    Bind { protocol: ProtocolId, addr: SocketAddr, source: io::Error },
    #[error("frame consumer closed")]
    ConsumerClosed,
    #[error("link disconnected")]
    Disconnected,
    #[error("frame for {frame} sent on a {endpoint} link")]
    ProtocolMismatch { endpoint: ProtocolId, frame: ProtocolId },
    #[error("no connected peer for node {0}")]
    UnknownPeer(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Receives the size of every frame that passed the CRC check.
pub trait ByteCounter: Send + Sync {
    fn record(&self, protocol: ProtocolId, bytes: u64, at: SystemTime);
}

/// A well-formed frame as delivered to the ingest consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundFrame {
    pub frame: LinkFrame,
    /// Protocol of the endpoint the frame arrived on.
    pub protocol: ProtocolId,
    pub received_at: SystemTime,
    pub wire_len: usize,
    pub peer: SocketAddr,
}

#[derive(Debug, Default)]
pub struct LinkStats {
    pub accepted_frames: AtomicU64,
    pub accepted_bytes: AtomicU64,
    pub malformed_frames: AtomicU64,
    pub connections: AtomicU64,
}

impl LinkStats {
    pub fn accepted_frames(&self) -> u64 {
        self.accepted_frames.load(Ordering::Relaxed)
    }
    pub fn accepted_bytes(&self) -> u64 {
        self.accepted_bytes.load(Ordering::Relaxed)
    }
    pub fn malformed_frames(&self) -> u64 {
        self.malformed_frames.load(Ordering::Relaxed)
    }
}

enum PeerWriter {
    Stream(Arc<tokio::sync::Mutex<OwnedWriteHalf>>),
    Datagram(SocketAddr),
}

struct Shared {
    protocol: ProtocolId,
    sink: mpsc::Sender<InboundFrame>,
    counter: Option<Arc<dyn ByteCounter>>,
    stats: Arc<LinkStats>,
    peers: Mutex<HashMap<String, PeerWriter>>,
}

impl Shared {
    /// Hands a decoded frame to the consumer. Returns false once the consumer is gone.
    async fn deliver(&self, frame: LinkFrame, wire_len: usize, peer: SocketAddr) -> bool {
        if frame.protocol != self.protocol {
            self.stats.malformed_frames.fetch_add(1, Ordering::Relaxed);
            return true;
        }
        let received_at = SystemTime::now();
        self.stats.accepted_frames.fetch_add(1, Ordering::Relaxed);
        self.stats.accepted_bytes.fetch_add(wire_len as u64, Ordering::Relaxed);
        if let Some(counter) = &self.counter {
            counter.record(self.protocol, wire_len as u64, received_at);
        }
        let inbound = InboundFrame { frame, protocol: self.protocol, received_at, wire_len, peer };
        self.sink.send(inbound).await.is_ok()
    }
}

/// A running listener on one link endpoint.
pub struct LinkListener {
    protocol: ProtocolId,
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    udp: Option<Arc<UdpSocket>>,
    shutdown: watch::Sender<bool>,
    task: Option<JoinHandle<Result<(), LinkError>>>,
}

/// Binds `endpoint` and starts delivering every well-formed frame to `sink`.
pub async fn listen(
    endpoint: &LinkEndpoint,
    sink: mpsc::Sender<InboundFrame>,
    counter: Option<Arc<dyn ByteCounter>>,
) -> Result<LinkListener, LinkError> {
    let bind_err = |source| LinkError::Bind { protocol: endpoint.protocol, addr: endpoint.bind_address, source };
    let shared = Arc::new(Shared {
        protocol: endpoint.protocol,
        sink,
        counter,
        stats: Arc::new(LinkStats::default()),
        peers: Mutex::new(HashMap::new()),
    });
    let (shutdown, shutdown_rx) = watch::channel(false);
    match endpoint.transport_kind {
        TransportKind::Stream => {
            let listener = TcpListener::bind(endpoint.bind_address).await.map_err(bind_err)?;
            let local_addr = listener.local_addr()?;
            let task = tokio::spawn(accept_loop(listener, shared.clone(), shutdown_rx));
            Ok(LinkListener { protocol: endpoint.protocol, local_addr, shared, udp: None, shutdown, task: Some(task) })
        }
        TransportKind::Datagram => {
            let socket = Arc::new(UdpSocket::bind(endpoint.bind_address).await.map_err(bind_err)?);
            let local_addr = socket.local_addr()?;
            let task = tokio::spawn(datagram_loop(socket.clone(), shared.clone(), shutdown_rx));
            Ok(LinkListener {
                protocol: endpoint.protocol,
                local_addr,
                shared,
                udp: Some(socket),
                shutdown,
                task: Some(task),
            })
        }
    }
}

impl LinkListener {
    pub fn protocol(&self) -> ProtocolId {
        self.protocol
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> Arc<LinkStats> {
        self.shared.stats.clone()
    }

    pub fn is_running(&self) -> bool {
        self.task.as_ref().is_some_and(|t| !t.is_finished())
    }

    /// Sends a downlink frame to a node that has previously talked on this link.
    pub async fn send_to_node(&self, frame: &LinkFrame) -> Result<(), LinkError> {
        if frame.protocol != self.protocol {
            return Err(LinkError::ProtocolMismatch { endpoint: self.protocol, frame: frame.protocol });
        }
        let bytes = encode_frame(frame)?;
        let target = {
            let peers = self.shared.peers.lock();
            match peers.get(&frame.node_id) {
                Some(PeerWriter::Stream(w)) => PeerWriter::Stream(w.clone()),
                Some(PeerWriter::Datagram(a)) => PeerWriter::Datagram(*a),
                None => return Err(LinkError::UnknownPeer(frame.node_id.clone())),
            }
        };
        match target {
            PeerWriter::Stream(writer) => {
                let mut w = writer.lock().await;
                w.write_all(&bytes).await.map_err(|_| LinkError::Disconnected)
            }
            PeerWriter::Datagram(addr) => {
                let socket = self.udp.as_ref().expect("datagram listener owns a socket");
                socket.send_to(&bytes, addr).await?;
                Ok(())
            }
        }
    }

    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
    }

    /// Waits for the listener task; `ConsumerClosed` if the sink went away.
    pub async fn join(mut self) -> Result<(), LinkError> {
        match self.task.take() {
            Some(task) => task.await.unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for LinkListener {
    fn drop(&mut self) {
        let _ = self.shutdown.send(true);
    }
}

async fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), LinkError> {
    let (closed_tx, mut closed_rx) = mpsc::channel::<()>(1);
    loop {
        tokio::select! {
            _ = shutdown.changed() => return Ok(()),
            _ = closed_rx.recv() => return Err(LinkError::ConsumerClosed),
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(a) => a,
                    Err(e) => {
                        log::warn!("{} accept failed: {e}", shared.protocol);
                        continue;
                    }
                };
                let _ = stream.set_nodelay(true);
                shared.stats.connections.fetch_add(1, Ordering::Relaxed);
                let shared = shared.clone();
                let closed_tx = closed_tx.clone();
                let shutdown = shutdown.clone();
                tokio::spawn(async move {
                    if !serve_stream(stream, peer, shared, shutdown).await {
                        let _ = closed_tx.try_send(());
                    }
                });
            }
        }
    }
}

/// Returns false if the consumer closed.
async fn serve_stream(
    stream: TcpStream,
    peer: SocketAddr,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) -> bool {
    let (mut reader, writer) = stream.into_split();
    let writer = Arc::new(tokio::sync::Mutex::new(writer));
    let mut decoder = StreamDecoder::new();
    let mut buf = vec![0u8; 4096];
    let mut known_ids: Vec<String> = Vec::new();
    let ok = loop {
        let n = tokio::select! {
            _ = shutdown.changed() => break true,
            r = reader.read(&mut buf) => match r {
                Ok(0) | Err(_) => break true,
                Ok(n) => n,
            },
        };
        decoder.extend(&buf[..n]);
        let mut consumer_open = true;
        while let Some(item) = decoder.next_item() {
            match item {
                StreamItem::Frame(frame, wire_len) => {
                    if !known_ids.contains(&frame.node_id) {
                        known_ids.push(frame.node_id.clone());
                        shared.peers.lock().insert(frame.node_id.clone(), PeerWriter::Stream(writer.clone()));
                    }
                    if !shared.deliver(frame, wire_len, peer).await {
                        consumer_open = false;
                        break;
                    }
                }
                StreamItem::Malformed(e, _) => {
                    log::debug!("{} malformed frame from {peer}: {e}", shared.protocol);
                    shared.stats.malformed_frames.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        if !consumer_open {
            break false;
        }
    };
    let mut peers = shared.peers.lock();
    for id in known_ids {
        if matches!(peers.get(&id), Some(PeerWriter::Stream(w)) if Arc::ptr_eq(w, &writer)) {
            peers.remove(&id);
        }
    }
    ok
}

async fn datagram_loop(
    socket: Arc<UdpSocket>,
    shared: Arc<Shared>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), LinkError> {
    let mut buf = vec![0u8; 2048];
    loop {
        let (n, peer) = tokio::select! {
            _ = shutdown.changed() => return Ok(()),
            r = socket.recv_from(&mut buf) => match r {
                Ok(r) => r,
                // ICMP errors surface here on some platforms; keep serving.
                Err(_) => continue,
            },
        };
        match decode_frame(&buf[..n]) {
            Ok(frame) => {
                shared.peers.lock().insert(frame.node_id.clone(), PeerWriter::Datagram(peer));
                if !shared.deliver(frame, n, peer).await {
                    return Err(LinkError::ConsumerClosed);
                }
            }
            Err(e) => {
                log::debug!("{} malformed datagram from {peer}: {e}", shared.protocol);
                shared.stats.malformed_frames.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// Node side of a link: a connection to one gateway endpoint.
pub struct LinkConnection {
    protocol: ProtocolId,
    inner: ConnInner,
    downlink: mpsc::UnboundedReceiver<LinkFrame>,
}

enum ConnInner {
    Stream { writer: OwnedWriteHalf, closed: Arc<AtomicBool>, reader: JoinHandle<()> },
    Datagram { socket: Arc<UdpSocket>, reader: JoinHandle<()> },
}

impl LinkConnection {
    pub async fn connect(endpoint: &LinkEndpoint) -> Result<Self, LinkError> {
        let (tx, downlink) = mpsc::unbounded_channel();
        let inner = match endpoint.transport_kind {
            TransportKind::Stream => {
                let stream = TcpStream::connect(endpoint.bind_address).await?;
                let _ = stream.set_nodelay(true);
                let (mut read, writer) = stream.into_split();
                let closed = Arc::new(AtomicBool::new(false));
                let flag = closed.clone();
                let reader = tokio::spawn(async move {
                    let mut decoder = StreamDecoder::new();
                    let mut buf = vec![0u8; 2048];
                    loop {
                        match read.read(&mut buf).await {
                            Ok(0) | Err(_) => break,
                            Ok(n) => {
                                decoder.extend(&buf[..n]);
                                while let Some(item) = decoder.next_item() {
                                    if let StreamItem::Frame(f, _) = item {
                                        let _ = tx.send(f);
                                    }
                                }
                            }
                        }
                    }
                    flag.store(true, Ordering::SeqCst);
                });
                ConnInner::Stream { writer, closed, reader }
            }
            TransportKind::Datagram => {
                let local: SocketAddr = if endpoint.bind_address.is_ipv4() {
                    ([0, 0, 0, 0], 0).into()
                } else {
                    (std::net::Ipv6Addr::UNSPECIFIED, 0).into()
                };
                let socket = Arc::new(UdpSocket::bind(local).await?);
                socket.connect(endpoint.bind_address).await?;
                let rx_socket = socket.clone();
                let reader = tokio::spawn(async move {
                    let mut buf = vec![0u8; 2048];
                    loop {
                        match rx_socket.recv(&mut buf).await {
                            Ok(n) => {
                                if let Ok(f) = decode_frame(&buf[..n]) {
                                    let _ = tx.send(f);
                                }
                            }
                            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                            Err(_) => break,
                        }
                    }
                });
                ConnInner::Datagram { socket, reader }
            }
        };
        Ok(LinkConnection { protocol: endpoint.protocol, inner, downlink })
    }

    pub fn protocol(&self) -> ProtocolId {
        self.protocol
    }

    /// True once the peer has closed a stream connection.
    pub fn is_closed(&self) -> bool {
        match &self.inner {
            ConnInner::Stream { closed, .. } => closed.load(Ordering::SeqCst),
            ConnInner::Datagram { .. } => false,
        }
    }

    /// Writes one frame; on streams the whole encoding goes out in a single write.
    pub async fn send(&mut self, frame: &LinkFrame) -> Result<usize, LinkError> {
        if frame.protocol != self.protocol {
            return Err(LinkError::ProtocolMismatch { endpoint: self.protocol, frame: frame.protocol });
        }
        let bytes = encode_frame(frame)?;
        match &mut self.inner {
            ConnInner::Stream { writer, closed, .. } => {
                if closed.load(Ordering::SeqCst) {
                    return Err(LinkError::Disconnected);
                }
                writer.write_all(&bytes).await.map_err(|_| LinkError::Disconnected)?;
            }
            ConnInner::Datagram { socket, .. } => {
                let sent = socket.send(&bytes).await.map_err(|e| match e.kind() {
                    io::ErrorKind::ConnectionRefused => LinkError::Disconnected,
                    _ => LinkError::Io(e),
                })?;
                if sent != bytes.len() {
                    return Err(LinkError::Disconnected);
                }
            }
        }
        Ok(bytes.len())
    }

    /// Next downlink frame from the gateway, if any arrives.
    pub async fn recv(&mut self) -> Option<LinkFrame> {
        self.downlink.recv().await
    }
}

impl Drop for LinkConnection {
    fn drop(&mut self) {
        match &self.inner {
            ConnInner::Stream { reader, .. } | ConnInner::Datagram { reader, .. } => reader.abort(),
        }
    }
}
