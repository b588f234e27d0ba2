use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Local};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::{mpsc, watch};

use crate::link::InboundFrame;
use crate::mqtt::{Broker, QoS, TopicName, UplinkClient, UplinkError};
use crate::normalizer::{normalize, parse_payload, serialize_record, SensorRecord};
use crate::registry::{evaluate_rules, RecentRecords, Registry};

/// Why a frame produced no upstream records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectCause {
    MalformedPayload,
    EmptyPayload,
    NodeDisabled,
    BadTopic,
    UplinkClosed,
}

/// Every frame the ingest task takes is either published or rejected with a
/// cause, exactly once.
#[derive(Debug, Default)]
pub struct PipelineStats {
    pub frames_in: AtomicU64,
    pub frames_published: AtomicU64,
    pub records_published: AtomicU64,
    pub alerts: AtomicU64,
    pub rules_skipped_non_numeric: AtomicU64,
    rejected: Mutex<BTreeMap<RejectCause, u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PipelineSnapshot {
    pub frames_in: u64,
    pub frames_published: u64,
    pub frames_rejected: u64,
    pub records_published: u64,
    pub alerts: u64,
    pub rules_skipped_non_numeric: u64,
    pub rejected: BTreeMap<RejectCause, u64>,
}

impl PipelineSnapshot {
    /// Frames taken in but neither published nor rejected.
    pub fn unaccounted(&self) -> i64 {
        self.frames_in as i64 - self.frames_published as i64 - self.frames_rejected as i64
    }
}

impl PipelineStats {
    fn reject(&self, cause: RejectCause) {
        *self.rejected.lock().entry(cause).or_default() += 1;
    }

    pub fn snapshot(&self) -> PipelineSnapshot {
        let rejected = self.rejected.lock().clone();
        PipelineSnapshot {
            frames_in: self.frames_in.load(Ordering::SeqCst),
            frames_published: self.frames_published.load(Ordering::SeqCst),
            frames_rejected: rejected.values().sum(),
            records_published: self.records_published.load(Ordering::SeqCst),
            alerts: self.alerts.load(Ordering::Relaxed),
            rules_skipped_non_numeric: self.rules_skipped_non_numeric.load(Ordering::Relaxed),
            rejected,
        }
    }
}

/// Uplink topic of a record: `piico/<network-id>/<gate-id>/<node-id>/<sensor-id>`.
pub fn uplink_topic(rec: &SensorRecord) -> Option<TopicName> {
    TopicName::new(format!("piico/{}/{}/{}/{}", rec.network_id, rec.gate_id, rec.node_id, rec.sensor_id)).ok()
}

pub struct Ingest {
    pub registry: Arc<Registry>,
    pub recent: Arc<RecentRecords>,
    pub uplink: Arc<UplinkClient>,
    pub broker: Arc<Broker>,
    pub stats: Arc<PipelineStats>,
}

impl Ingest {
    /// decode (done by the listener) → parse → normalize → serialize →
    /// uplink + recent + rules.
    pub fn handle(&self, inbound: InboundFrame) {
        self.stats.frames_in.fetch_add(1, Ordering::SeqCst);
        match self.process(&inbound) {
            Ok(n) => {
                self.stats.records_published.fetch_add(n as u64, Ordering::SeqCst);
                self.stats.frames_published.fetch_add(1, Ordering::SeqCst);
            }
            Err(cause) => {
                log::debug!("frame from {} on {} rejected: {cause:?}", inbound.frame.node_id, inbound.protocol);
                self.stats.reject(cause);
            }
        }
    }

    fn process(&self, inbound: &InboundFrame) -> Result<usize, RejectCause> {
        let readings = parse_payload(&inbound.frame.payload).map_err(|_| RejectCause::MalformedPayload)?;
        if readings.is_empty() {
            return Err(RejectCause::EmptyPayload);
        }
        let snapshot = self.registry.snapshot();
        let node_id = inbound.frame.node_id.as_str();
        if snapshot.nodes.get(node_id).is_some_and(|n| !n.enabled) {
            return Err(RejectCause::NodeDisabled);
        }
        let receipt = DateTime::<Local>::from(inbound.received_at).naive_local();
        let mut out = Vec::with_capacity(readings.len());
        for r in &readings {
            let rec = normalize(r, inbound.protocol, node_id, receipt, &snapshot.identity, |id| snapshot.gps_of(id));
            let topic = uplink_topic(&rec).ok_or(RejectCause::BadTopic)?;
            out.push((topic, rec));
        }
        for (topic, rec) in out.iter() {
            let payload = serialize_record(rec);
            match self.uplink.publish(topic.clone(), payload) {
                // A full buffer drops its oldest entry; that loss is counted by the uplink.
                Ok(_) => {}
                Err(UplinkError::PermanentlyClosed) => return Err(RejectCause::UplinkClosed),
                Err(UplinkError::Dropped) => {}
            }
        }
        let n = out.len();
        for (_, rec) in out {
            let outcome = evaluate_rules(snapshot.rules.values(), &rec);
            self.stats.rules_skipped_non_numeric.fetch_add(outcome.skipped_non_numeric as u64, Ordering::Relaxed);
            for alert in outcome.alerts {
                self.stats.alerts.fetch_add(1, Ordering::Relaxed);
                self.broker.publish(alert.topic, alert.payload, QoS::AtLeastOnce, false);
            }
            self.recent.push(rec);
        }
        Ok(n)
    }

    /// Consumes frames until shutdown, then drains what is already queued.
    pub async fn run(self, mut rx: mpsc::Receiver<InboundFrame>, mut shutdown: watch::Receiver<bool>) {
        loop {
            tokio::select! {
                biased;
                frame = rx.recv() => match frame {
                    Some(f) => self.handle(f),
                    None => return,
                },
                _ = shutdown.changed() => break,
            }
        }
        while let Ok(f) = rx.try_recv() {
            self.handle(f);
        }
    }
}
