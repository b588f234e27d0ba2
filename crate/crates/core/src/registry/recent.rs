use std::collections::VecDeque;

use parking_lot::Mutex;

use crate::normalizer::SensorRecord;

pub const DEFAULT_RECENT_CAPACITY: usize = 10_000;

/// Ring of the newest normalized records, for the API and UI.
#[derive(Debug)]
pub struct RecentRecords {
    capacity: usize,
    ring: Mutex<VecDeque<SensorRecord>>,
}

impl Default for RecentRecords {
    fn default() -> Self {
        Self::new(DEFAULT_RECENT_CAPACITY)
    }
}

impl RecentRecords {
    pub fn new(capacity: usize) -> Self {
        RecentRecords { capacity: capacity.max(1), ring: Mutex::new(VecDeque::new()) }
    }

    pub fn push(&self, rec: SensorRecord) {
        let mut ring = self.ring.lock();
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(rec);
    }

    /// Up to `n` records, newest first.
    pub fn latest(&self, n: usize) -> Vec<SensorRecord> {
        self.ring.lock().iter().rev().take(n).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.ring.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
