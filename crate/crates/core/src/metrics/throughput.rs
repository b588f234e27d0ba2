use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::epoch_ms;
use crate::link::ByteCounter;
use crate::protocol::ProtocolId;

/// Traffic seen on one interface during one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub interface: ProtocolId,
    pub window_start_ms: u64,
    pub window_len_ms: u64,
    pub bytes: u64,
    pub bps: f64,
}

impl ThroughputSample {
    fn new(interface: ProtocolId, window_start_ms: u64, window_len_ms: u64, bytes: u64) -> Self {
        // bytes * 8 * 1000 is exact in u64 for any realistic count; one division.
        let bps = (bytes * 8_000) as f64 / window_len_ms as f64;
        ThroughputSample { interface, window_start_ms, window_len_ms, bytes, bps }
    }
}

#[derive(Debug, Default)]
struct Windows {
    /// (window index, bytes), ascending by index, gaps allowed.
    slots: VecDeque<(u64, u64)>,
}

/// Accumulates accepted link bytes into fixed windows per interface.
#[derive(Debug)]
pub struct ThroughputMeter {
    window_ms: u64,
    capacity: usize,
    windows: BTreeMap<ProtocolId, Mutex<Windows>>,
    totals: BTreeMap<ProtocolId, AtomicU64>,
    late: AtomicU64,
}

impl Default for ThroughputMeter {
    fn default() -> Self {
        Self::new(Duration::from_secs(1), 3600)
    }
}

impl ThroughputMeter {
    /// `capacity` bounds how many windows are kept per interface.
    pub fn new(window: Duration, capacity: usize) -> Self {
        let window_ms = (window.as_millis() as u64).max(1);
        ThroughputMeter {
            window_ms,
            capacity: capacity.max(1),
            windows: ProtocolId::ALL.into_iter().map(|p| (p, Mutex::new(Windows::default()))).collect(),
            totals: ProtocolId::ALL.into_iter().map(|p| (p, AtomicU64::new(0))).collect(),
            late: AtomicU64::new(0),
        }
    }

    pub fn window(&self) -> Duration {
        Duration::from_millis(self.window_ms)
    }

    pub fn record_bytes(&self, interface: ProtocolId, n_bytes: u64, at: SystemTime) {
        self.totals[&interface].fetch_add(n_bytes, Ordering::Relaxed);
        let index = epoch_ms(at) / self.window_ms;
        let mut w = self.windows[&interface].lock();
        let slots = &mut w.slots;
        if slots.back().is_some_and(|&(newest, _)| index + self.capacity as u64 <= newest) {
            self.late.fetch_add(n_bytes, Ordering::Relaxed);
            return;
        }
        match slots.back_mut() {
            Some((last, bytes)) if *last == index => *bytes += n_bytes,
            // Concurrent listeners may stamp slightly out of order.
            Some((last, _)) if *last > index => match slots.binary_search_by_key(&index, |&(i, _)| i) {
                Ok(pos) => slots[pos].1 += n_bytes,
                Err(pos) => slots.insert(pos, (index, n_bytes)),
            },
            _ => slots.push_back((index, n_bytes)),
        }
        while let (Some(&(first, _)), Some(&(last, _))) = (slots.front(), slots.back()) {
            if last - first < self.capacity as u64 {
                break;
            }
            slots.pop_front();
        }
    }

    /// Contiguous windows covering `[from, to)`, zero-filled. `from` is
    /// snapped down to the window grid; the series has
    /// `ceil((to - from) / window)` entries.
    pub fn window_series(&self, interface: ProtocolId, from: SystemTime, to: SystemTime) -> Vec<ThroughputSample> {
        let (from_ms, to_ms) = (epoch_ms(from), epoch_ms(to));
        if to_ms <= from_ms {
            return Vec::new();
        }
        let count = (to_ms - from_ms).div_ceil(self.window_ms);
        let first = from_ms / self.window_ms;
        let w = self.windows[&interface].lock();
        let start = w.slots.partition_point(|&(i, _)| i < first);
        let mut present = w.slots.iter().skip(start).peekable();
        (first..first + count)
            .map(|index| {
                let bytes = match present.peek() {
                    Some(&&(i, b)) if i == index => {
                        present.next();
                        b
                    }
                    _ => 0,
                };
                ThroughputSample::new(interface, index * self.window_ms, self.window_ms, bytes)
            })
            .collect()
    }

    /// Bytes recorded on the interface since start, including evicted windows.
    pub fn total_bytes(&self, interface: ProtocolId) -> u64 {
        self.totals[&interface].load(Ordering::Relaxed)
    }

    /// Bytes that arrived for windows older than the retained range.
    pub fn late_bytes(&self) -> u64 {
        self.late.load(Ordering::Relaxed)
    }
}

impl ByteCounter for ThroughputMeter {
    fn record(&self, protocol: ProtocolId, bytes: u64, at: SystemTime) {
        self.record_bytes(protocol, bytes, at);
    }
}
