use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tokio::time::{sleep, sleep_until, Instant};

use super::SimNodeConfig;
use crate::link::{LinkConnection, LinkEndpoint, LinkError, LinkFrame};
use crate::mqtt::{Connect, MqttConnection, QoS, TopicFilter};
use crate::normalizer::{encode_payload, RawReading};
use crate::protocol::ProtocolId;
use crate::registry::{config_topic, ConfigCommand};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("node {node}: {reason}")]
    Config { node: String, reason: String },
    #[error("node task failed: {0}")]
    Task(String),
}

/// Where a node's frames go. Real runs use sockets; tests script outages.
pub trait NodeLinks: Send {
    fn send(&mut self, frame: &LinkFrame) -> impl Future<Output = Result<usize, LinkError>> + Send;
}

/// One lazily (re)connected link per protocol.
pub struct SocketLinks {
    endpoints: BTreeMap<ProtocolId, LinkEndpoint>,
    conns: BTreeMap<ProtocolId, LinkConnection>,
}

impl SocketLinks {
    pub fn new(endpoints: &BTreeMap<ProtocolId, SocketAddr>) -> Self {
        SocketLinks {
            endpoints: endpoints.iter().map(|(&p, &a)| (p, LinkEndpoint::new(p, a))).collect(),
            conns: BTreeMap::new(),
        }
    }
}

impl NodeLinks for SocketLinks {
    fn send(&mut self, frame: &LinkFrame) -> impl Future<Output = Result<usize, LinkError>> + Send {
        async move {
            let p = frame.protocol;
            if self.conns.get(&p).is_some_and(LinkConnection::is_closed) {
                self.conns.remove(&p);
            }
            if !self.conns.contains_key(&p) {
                let endpoint = self.endpoints.get(&p).ok_or(LinkError::Disconnected)?;
                self.conns.insert(p, LinkConnection::connect(endpoint).await?);
            }
            let conn = self.conns.get_mut(&p).expect("connected above");
            let sent = conn.send(frame).await;
            if sent.is_err() {
                self.conns.remove(&p);
            }
            sent
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub frames_sent: u64,
    /// Encoded frame bytes, header and CRC included.
    pub bytes_sent: u64,
    pub failures: u64,
    pub sensors: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub node_id: String,
    pub ticks: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub send_failures: u64,
    pub protocols: BTreeMap<ProtocolId, ProtocolReport>,
    pub config_updates: u64,
    pub final_period: u32,
    /// Wall-clock offset of every tick from the start of the run.
    pub tick_offsets_ms: Vec<u64>,
}

fn client_id(node_id: &str) -> String {
    let mut id = format!("sim-{node_id}");
    while id.len() > 23 {
        id.pop();
    }
    id
}

/// Keeps a subscription to the node's retained config and forwards every
/// command addressed to it. Reconnects until the receiver goes away.
async fn follow_config(broker: SocketAddr, node_id: String, tx: mpsc::UnboundedSender<ConfigCommand>) {
    let filter = TopicFilter::new(config_topic(&node_id)).expect("node ids are topic-safe");
    while !tx.is_closed() {
        let session = async {
            let mut conn = MqttConnection::connect(broker, Connect::new(client_id(&node_id), 0)).await?;
            conn.subscribe(filter.clone(), QoS::AtLeastOnce).await?;
            loop {
                let p = conn.next_publish().await?;
                if p.payload.is_empty() {
                    continue;
                }
                match serde_json::from_slice::<ConfigCommand>(&p.payload) {
                    Ok(cmd) if cmd.target_node == node_id => {
                        if tx.send(cmd).is_err() {
                            return Ok(());
                        }
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("{node_id}: ignoring unreadable config: {e}"),
                }
            }
        };
        let result: Result<(), crate::mqtt::ClientError> = tokio::select! {
            r = session => r,
            _ = tx.closed() => return,
        };
        if let Err(e) = result {
            log::debug!("{node_id}: config subscription lost: {e}");
        }
        sleep(Duration::from_millis(500)).await;
    }
}

/// Runs one node for its configured duration, subscribing to its retained
/// config if a broker is set.
pub async fn run_node<L: NodeLinks>(config: SimNodeConfig, links: L) -> Result<RunReport, SimError> {
    let (tx, rx) = mpsc::unbounded_channel();
    let follower = config.broker.map(|b| tokio::spawn(follow_config(b, config.node_id.clone(), tx)));
    let report = run_node_with_commands(config, links, rx).await;
    if let Some(f) = follower {
        f.abort();
    }
    report
}

/// Like `run_node`, with config commands supplied by the caller. Commands are
/// applied between ticks; a new period takes effect from the last tick.
pub async fn run_node_with_commands<L: NodeLinks>(
    config: SimNodeConfig,
    mut links: L,
    mut commands: mpsc::UnboundedReceiver<ConfigCommand>,
) -> Result<RunReport, SimError> {
    config.validate()?;
    let mut gens = Vec::with_capacity(config.sensors.len());
    for s in &config.sensors {
        gens.push(s.generator.start().map_err(|e| SimError::Config { node: config.node_id.clone(), reason: e.to_string() })?);
    }
    let mut protocols: Vec<ProtocolId> = config.sensors.iter().map(|s| s.protocol).collect();
    let mut period = config.sampling_period;
    let mut seqs: BTreeMap<ProtocolId, u16> = BTreeMap::new();
    let mut report = RunReport { node_id: config.node_id.clone(), ..Default::default() };

    let start = Instant::now();
    let end = start + config.scaled(config.run_duration as f64);
    let mut last_tick: Option<Instant> = None;
    let mut next_tick = start;
    loop {
        if next_tick >= end {
            break;
        }
        loop {
            tokio::select! {
                biased;
                Some(cmd) = commands.recv() => {
                    report.config_updates += 1;
                    if let Some(p) = cmd.sampling_period.filter(|&p| p >= 1) {
                        period = p;
                        if let Some(t) = last_tick {
                            next_tick = t + config.scaled(period as f64);
                        }
                    }
                    if let Some(overrides) = &cmd.protocol_overrides {
                        for (i, s) in config.sensors.iter().enumerate() {
                            match overrides.get(&s.sensor_id) {
                                Some(p) if config.endpoints.contains_key(p) => protocols[i] = *p,
                                Some(p) => log::warn!("{}: no {p} endpoint for {}", config.node_id, s.sensor_id),
                                None => {}
                            }
                        }
                    }
                }
                _ = sleep_until(next_tick) => break,
            }
        }
        if next_tick >= end {
            break;
        }
        report.ticks += 1;
        report.tick_offsets_ms.push(Instant::now().duration_since(start).as_millis() as u64);
        for (i, s) in config.sensors.iter().enumerate() {
            let protocol = protocols[i];
            let reading = RawReading::new(s.sensor_id.as_str(), gens[i].next_value(), s.magnitude.as_str());
            let seq = seqs.entry(protocol).or_insert(0);
            let frame = LinkFrame::new(protocol, config.node_id.as_str(), *seq, encode_payload(&[reading]));
            *seq = seq.wrapping_add(1);
            let entry = report.protocols.entry(protocol).or_default();
            entry.sensors.insert(s.sensor_id.clone());
            match links.send(&frame).await {
                Ok(n) => {
                    entry.frames_sent += 1;
                    entry.bytes_sent += n as u64;
                    report.frames_sent += 1;
                    report.bytes_sent += n as u64;
                }
                Err(e) => {
                    log::debug!("{}: {protocol} send failed: {e}", config.node_id);
                    entry.failures += 1;
                    report.send_failures += 1;
                }
            }
        }
        last_tick = Some(next_tick);
        next_tick += config.scaled(period as f64);
    }
    report.final_period = period;
    Ok(report)
}

/// Runs every node concurrently over real sockets.
pub async fn run_fleet(configs: Vec<SimNodeConfig>) -> Result<Vec<RunReport>, SimError> {
    for c in &configs {
        c.validate()?;
    }
    let tasks: Vec<_> = configs
        .into_iter()
        .map(|c| {
            let links = SocketLinks::new(&c.endpoints);
            tokio::spawn(run_node(c, links))
        })
        .collect();
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        out.push(t.await.map_err(|e| SimError::Task(e.to_string()))??);
    }
    Ok(out)
}
