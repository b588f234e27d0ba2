//! Per-interface throughput and host resource time series.

mod resources;
mod series;
mod throughput;

pub use resources::{HostProvider, ProviderError, ResourceProvider, ResourceReading, ResourceSample, ResourceSampler};
pub use series::{SeriesBuffer, Timestamped};
pub use throughput::{ThroughputMeter, ThroughputSample};

use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Milliseconds since the Unix epoch.
pub fn epoch_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_millis() as u64
}

pub fn from_epoch_ms(ms: u64) -> SystemTime {
    UNIX_EPOCH + Duration::from_millis(ms)
}
