//! Composes links, broker, uplink, registry API and metrics into the gateway process.

mod config;
mod pipeline;

pub use config::{
    dump_config, load_config, parse_config, ConfigError, GatewayConfig, MetricsConfig, PortConfig, UpstreamConfig,
    DEFAULT_UPSTREAM,
};
pub use pipeline::{uplink_topic, Ingest, PipelineSnapshot, PipelineStats, RejectCause};

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::link::{listen, ByteCounter, LinkEndpoint, LinkError, LinkListener};
use crate::metrics::{epoch_ms, HostProvider, ResourceProvider, ResourceSampler, ThroughputMeter};
use crate::mqtt::{broker_serve, Broker, BrokerConfig, QoS, TopicName, UplinkClient, UplinkConfig, UplinkSnapshot, UplinkStatus};
use crate::protocol::{ProtocolId, RADIO_LINKS};
use crate::registry::api::{router, ApiState};
use crate::registry::{config_topic, ConfigSink, RecentRecords, Registry, StoreError};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BIND: i32 = 2;
pub const UPLINK_FLUSH_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state file: {0}")]
    State(#[from] StoreError),
    #[error("{component}: cannot bind {addr}: {source}")]
    Bind { component: String, addr: SocketAddr, source: std::io::Error },
}

impl StartupError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StartupError::Bind { .. } => EXIT_BIND,
            _ => EXIT_CONFIG,
        }
    }

    /// Name of the component that failed to bind, if that was the failure.
    pub fn component(&self) -> Option<&str> {
        match self {
            StartupError::Bind { component, .. } => Some(component),
            _ => None,
        }
    }
}

/// Publishes retained node configuration through the embedded broker.
struct BrokerConfigSink(Arc<Broker>);

impl ConfigSink for BrokerConfigSink {
    fn node_config(&self, node_id: &str, payload: Option<Vec<u8>>) {
        match TopicName::new(config_topic(node_id)) {
            Ok(topic) => self.0.publish(topic, payload.unwrap_or_default(), QoS::AtLeastOnce, true),
            Err(e) => log::warn!("cannot publish config for {node_id}: {e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Overall {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkHealth {
    pub up: bool,
    pub address: SocketAddr,
    pub accepted_frames: u64,
    pub accepted_bytes: u64,
    pub malformed_frames: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HealthReport {
    pub status: Overall,
    pub links: BTreeMap<ProtocolId, LinkHealth>,
    pub broker: serde_json::Value,
    pub uplink: UplinkSnapshot,
    pub pipeline: PipelineSnapshot,
    pub uptime_s: u64,
}

struct Parts {
    links: Vec<Arc<LinkListener>>,
    broker: Arc<Broker>,
    uplink: Arc<UplinkClient>,
    pipeline: Arc<PipelineStats>,
    started: Instant,
}

impl Parts {
    fn health(&self) -> HealthReport {
        let links: BTreeMap<_, _> = self
            .links
            .iter()
            .map(|l| {
                let s = l.stats();
                let h = LinkHealth {
                    up: l.is_running(),
                    address: l.local_addr(),
                    accepted_frames: s.accepted_frames(),
                    accepted_bytes: s.accepted_bytes(),
                    malformed_frames: s.malformed_frames(),
                };
                (l.protocol(), h)
            })
            .collect();
        let uplink = self.uplink.snapshot();
        let broker_up = self.broker.is_running();
        let ok = broker_up && links.values().all(|l| l.up) && uplink.status == UplinkStatus::Connected;
        HealthReport {
            status: if ok { Overall::Ok } else { Overall::Degraded },
            links,
            broker: json!({
                "up": broker_up,
                "address": self.broker.local_addr(),
                "sessions": self.broker.session_count(),
                "retained": self.broker.retained_count(),
            }),
            uplink,
            pipeline: self.pipeline.snapshot(),
            uptime_s: self.started.elapsed().as_secs(),
        }
    }
}

/// A running gateway.
pub struct GatewayHandle {
    parts: Arc<Parts>,
    pub registry: Arc<Registry>,
    pub recent: Arc<RecentRecords>,
    pub throughput: Arc<ThroughputMeter>,
    pub resources: Arc<Mutex<ResourceSampler>>,
    api_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShutdownReport {
    pub pipeline: PipelineSnapshot,
    pub uplink: UplinkSnapshot,
    /// Messages still buffered when the flush timeout expired.
    pub unflushed: usize,
}

impl GatewayHandle {
    pub fn api_addr(&self) -> SocketAddr {
        self.api_addr
    }

    pub fn broker_addr(&self) -> SocketAddr {
        self.parts.broker.local_addr()
    }

    pub fn link_addr(&self, protocol: ProtocolId) -> Option<SocketAddr> {
        self.parts.links.iter().find(|l| l.protocol() == protocol).map(|l| l.local_addr())
    }

    pub fn link_addrs(&self) -> BTreeMap<ProtocolId, SocketAddr> {
        self.parts.links.iter().map(|l| (l.protocol(), l.local_addr())).collect()
    }

    pub fn broker(&self) -> &Broker {
        &self.parts.broker
    }

    pub fn health(&self) -> HealthReport {
        self.parts.health()
    }

    pub fn pipeline(&self) -> PipelineSnapshot {
        self.parts.pipeline.snapshot()
    }

    pub fn uplink(&self) -> UplinkSnapshot {
        self.parts.uplink.snapshot()
    }

    /// Stops the listeners, drains queued frames, flushes the uplink and
    /// closes the broker. Registry state is already durable.
    pub async fn shutdown(self) -> ShutdownReport {
        let _ = self.shutdown.send(true);
        for l in &self.parts.links {
            l.shutdown();
        }
        for t in self.tasks {
            let _ = t.await;
        }
        let unflushed = self.parts.uplink.close(UPLINK_FLUSH_TIMEOUT).await;
        self.parts.broker.shutdown().await;
        ShutdownReport { pipeline: self.parts.pipeline.snapshot(), uplink: self.parts.uplink.snapshot(), unflushed }
    }
}

fn bind_error(component: &str, addr: SocketAddr, source: std::io::Error) -> StartupError {
    StartupError::Bind { component: component.into(), addr, source }
}

pub async fn run(config: GatewayConfig) -> Result<GatewayHandle, StartupError> {
    run_with_provider(config, Box::new(HostProvider::new())).await
}

/// Starts every component. Any bind failure tears down what was started and
/// names the component.
pub async fn run_with_provider(
    config: GatewayConfig,
    provider: Box<dyn ResourceProvider>,
) -> Result<GatewayHandle, StartupError> {
    config.validate()?;
    let registry = Arc::new(Registry::open(&config.state_file)?);
    if registry.seq() == 0 {
        // First start: seed the identity from the config file.
        if registry.snapshot().identity != config.identity {
            registry
                .apply(crate::registry::Change::SetIdentity { identity: config.identity.clone() })
                .map_err(|e| ConfigError::Validation { field: "identity".into(), reason: e.to_string() })?;
        }
    }

    let broker_addr = config.broker_addr();
    let broker = Arc::new(
        broker_serve(BrokerConfig::new(broker_addr)).await.map_err(|e| bind_error("broker", broker_addr, e))?,
    );

    let throughput = Arc::new(ThroughputMeter::new(Duration::from_millis(config.metrics.window_ms), config.metrics.window_capacity));
    let (frames_tx, frames_rx) = mpsc::channel(config.ingest_queue);
    let mut links = Vec::new();
    for p in RADIO_LINKS {
        let addr = config.link_addr(p).expect("radio links have ports");
        let counter: Arc<dyn ByteCounter> = throughput.clone();
        match listen(&LinkEndpoint::new(p, addr), frames_tx.clone(), Some(counter)).await {
            Ok(l) => links.push(Arc::new(l)),
            Err(LinkError::Bind { source, .. }) => {
                broker.shutdown().await;
                return Err(bind_error(&format!("{p} link"), addr, source));
            }
            Err(other) => {
                broker.shutdown().await;
                return Err(bind_error(&format!("{p} link"), addr, std::io::Error::other(other.to_string())));
            }
        }
    }
    drop(frames_tx);

    let api_bind = config.api_addr();
    let api_listener = match tokio::net::TcpListener::bind(api_bind).await {
        Ok(l) => l,
        Err(e) => {
            broker.shutdown().await;
            return Err(bind_error("api", api_bind, e));
        }
    };
    let api_addr = api_listener.local_addr().map_err(|e| bind_error("api", api_bind, e))?;

    let mut up = UplinkConfig::new(config.upstream.address.clone());
    up.client_id = config.upstream.client_id.clone();
    up.qos = config.upstream_qos();
    up.buffer_cap = config.upstream.buffer_cap;
    up.keep_alive = config.upstream.keep_alive_s;
    let uplink = Arc::new(UplinkClient::start(up));

    registry.set_sink(Arc::new(BrokerConfigSink(broker.clone())));

    let recent = Arc::new(RecentRecords::new(config.recent_capacity));
    let pipeline = Arc::new(PipelineStats::default());
    let resources = Arc::new(Mutex::new(ResourceSampler::new(config.resource_period(), config.metrics.resource_capacity)));
    let parts = Arc::new(Parts { links, broker: broker.clone(), uplink: uplink.clone(), pipeline: pipeline.clone(), started: Instant::now() });
    let (shutdown, shutdown_rx) = watch::channel(false);

    let ingest = Ingest { registry: registry.clone(), recent: recent.clone(), uplink, broker, stats: pipeline };
    let mut tasks = vec![tokio::spawn(ingest.run(frames_rx, shutdown_rx.clone()))];
    tasks.push(tokio::spawn(sample_resources(resources.clone(), provider, shutdown_rx.clone())));

    let health_parts = parts.clone();
    let api = router(ApiState {
        registry: registry.clone(),
        recent: recent.clone(),
        throughput: throughput.clone(),
        resources: resources.clone(),
        health: Arc::new(move || serde_json::to_value(health_parts.health()).expect("health serializes")),
        ui_dir: config.ui_dir.clone(),
    });
    let mut api_shutdown = shutdown_rx;
    tasks.push(tokio::spawn(async move {
        let stop = async move {
            let _ = api_shutdown.changed().await;
        };
        if let Err(e) = axum::serve(api_listener, api).with_graceful_shutdown(stop).await {
            log::error!("api server stopped: {e}");
        }
    }));

    log::info!("gateway up: api {api_addr}, broker {}", parts.broker.local_addr());
    Ok(GatewayHandle { parts, registry, recent, throughput, resources, api_addr, shutdown, tasks })
}

/// Polls often and lets the sampler's schedule decide when a sample is due,
/// so samples stay on the period grid.
async fn sample_resources(
    sampler: Arc<Mutex<ResourceSampler>>,
    mut provider: Box<dyn ResourceProvider>,
    mut shutdown: watch::Receiver<bool>,
) {
    let poll_every = (sampler.lock().period() / 10).clamp(Duration::from_millis(10), Duration::from_secs(1));
    let mut tick = tokio::time::interval(poll_every);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                let now = epoch_ms(SystemTime::now());
                sampler.lock().poll(now, provider.as_mut());
            }
            _ = shutdown.changed() => return,
        }
    }
}
