use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::series::{SeriesBuffer, Timestamped};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub at_ms: u64,
    pub cpu_pct: f64,
    pub ram_free_bytes: u64,
    pub ram_total_bytes: u64,
}

impl ResourceSample {
    pub fn free_fraction(&self) -> f64 {
        if self.ram_total_bytes == 0 {
            return 0.0;
        }
        self.ram_free_bytes as f64 / self.ram_total_bytes as f64
    }
}

impl Timestamped for ResourceSample {
    fn timestamp_ms(&self) -> u64 {
        self.at_ms
    }
}

/// Raw counters returned by a provider.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceReading {
    pub cpu_pct: f64,
    pub ram_free_bytes: u64,
    pub ram_total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("resource provider unavailable: {0}")]
pub struct ProviderError(pub String);

pub trait ResourceProvider: Send {
    fn read(&mut self) -> Result<ResourceReading, ProviderError>;
}

/// Reads CPU load and available memory from the host.
pub struct HostProvider {
    sys: sysinfo::System,
}

impl Default for HostProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl HostProvider {
    pub fn new() -> Self {
        let mut sys = sysinfo::System::new();
        // CPU usage is a delta; prime it so the first real read has a baseline.
        sys.refresh_cpu_usage();
        HostProvider { sys }
    }
}

impl ResourceProvider for HostProvider {
    fn read(&mut self) -> Result<ResourceReading, ProviderError> {
        self.sys.refresh_cpu_usage();
        self.sys.refresh_memory();
        let total = self.sys.total_memory();
        if total == 0 {
            return Err(ProviderError("host reports no memory".into()));
        }
        let cpu = self.sys.global_cpu_usage() as f64;
        Ok(ResourceReading {
            cpu_pct: cpu.clamp(0.0, 100.0),
            ram_free_bytes: self.sys.available_memory().min(total),
            ram_total_bytes: total,
        })
    }
}

/// Takes one sample per period on a fixed schedule and keeps the series.
#[derive(Debug)]
pub struct ResourceSampler {
    period_ms: u64,
    next_due_ms: Option<u64>,
    series: SeriesBuffer<ResourceSample>,
    skipped: u64,
}

impl ResourceSampler {
    pub fn new(period: Duration, capacity: usize) -> Self {
        ResourceSampler {
            period_ms: (period.as_millis() as u64).max(1),
            next_due_ms: None,
            series: SeriesBuffer::new(capacity),
            skipped: 0,
        }
    }

    pub fn period(&self) -> Duration {
        Duration::from_millis(self.period_ms)
    }

    /// Samples if a slot is due at `now_ms`. Slots missed while the caller was
    /// away are not back-filled.
    pub fn poll(&mut self, now_ms: u64, provider: &mut dyn ResourceProvider) -> Option<ResourceSample> {
        let due = *self.next_due_ms.get_or_insert(now_ms);
        if now_ms < due {
            return None;
        }
        let behind = (now_ms - due) / self.period_ms;
        self.next_due_ms = Some(due + (behind + 1) * self.period_ms);
        match provider.read() {
            Ok(r) => {
                let sample = ResourceSample {
                    at_ms: now_ms,
                    cpu_pct: r.cpu_pct.clamp(0.0, 100.0),
                    ram_free_bytes: r.ram_free_bytes.min(r.ram_total_bytes),
                    ram_total_bytes: r.ram_total_bytes,
                };
                self.series.push(sample.clone());
                Some(sample)
            }
            Err(e) => {
                log::debug!("{e}");
                self.skipped += 1;
                None
            }
        }
    }

    pub fn samples(&self) -> Vec<ResourceSample> {
        self.series.to_vec()
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub struct Scripted(pub Vec<Result<ResourceReading, ProviderError>>, usize);

    impl ResourceProvider for Scripted {
        fn read(&mut self) -> Result<ResourceReading, ProviderError> {
            let r = self.0[self.1 % self.0.len()].clone();
            self.1 += 1;
            r
        }
    }

    const GB: u64 = 1 << 30;

    #[test]
    fn scripted_sample_and_free_fraction() {
        let mut p = Scripted(vec![Ok(ResourceReading { cpu_pct: 3.0, ram_free_bytes: 3 * GB / 2, ram_total_bytes: 2 * GB })], 0);
        let mut s = ResourceSampler::new(Duration::from_secs(10), 100);
        let got = s.poll(0, &mut p).unwrap();
        assert_eq!(got.cpu_pct, 3.0);
        assert_eq!(got.free_fraction(), 0.75);
    }

    #[test]
    fn boundary_sample() {
        let mut p = Scripted(vec![Ok(ResourceReading { cpu_pct: 0.0, ram_free_bytes: GB, ram_total_bytes: GB })], 0);
        let mut s = ResourceSampler::new(Duration::from_secs(10), 100);
        let got = s.poll(5, &mut p).unwrap();
        assert_eq!(got.free_fraction(), 1.0);
        assert_eq!(got.cpu_pct, 0.0);
    }

    #[test]
    fn cadence_and_skips() {
        let ok = Ok(ResourceReading { cpu_pct: 1.0, ram_free_bytes: 1, ram_total_bytes: 2 });
        let mut p = Scripted(vec![ok.clone(), Err(ProviderError("down".into())), ok], 0);
        let mut s = ResourceSampler::new(Duration::from_secs(10), 100);
        for t in (0..60_000).step_by(500) {
            s.poll(t, &mut p);
        }
        // Six slots (0, 10, ..., 50 s); every third read fails.
        assert_eq!(s.samples().len() as u64 + s.skipped(), 6);
        assert_eq!(s.skipped(), 2);
        let at: Vec<u64> = s.samples().iter().map(|x| x.at_ms).collect();
        assert_eq!(at, vec![0, 20_000, 30_000, 50_000]);
    }

    #[test]
    fn host_provider_reads_something() {
        let mut p = HostProvider::new();
        if let Ok(r) = p.read() {
            assert!(r.ram_free_bytes <= r.ram_total_bytes);
            assert!((0.0..=100.0).contains(&r.cpu_pct));
        }
    }
}
