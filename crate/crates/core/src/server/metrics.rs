use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::kvcache::CacheStats;

pub const LATENCY_EDGES_MS: [f64; 11] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 300.0, 500.0, 1000.0];

/// Bucket `i` counts samples in `(edge[i-1], edge[i]]`; the final bucket
/// holds everything above the last edge.
#[derive(Debug)]
pub struct LatencyHistogram {
    counts: [AtomicU64; LATENCY_EDGES_MS.len() + 1],
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            counts: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }
}

impl LatencyHistogram {
    pub fn record(&self, ms: f64) {
        let i = LATENCY_EDGES_MS.partition_point(|&e| e < ms);
        self.counts[i].fetch_add(1, Ordering::Relaxed);
    }

    pub fn counts(&self) -> Vec<u64> {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }
}

#[derive(Debug)]
pub struct Metrics {
    started: Instant,
    pub admitted: AtomicU64,
    pub completed: AtomicU64,
    pub failed: AtomicU64,
    pub preemptions: AtomicU64,
    pub tokens: AtomicU64,
    pub first_packet: LatencyHistogram,
    cache: Mutex<CacheStats>,
}

impl Default for Metrics {
    fn default() -> Self {
        Self {
            started: Instant::now(),
            admitted: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            preemptions: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
            first_packet: LatencyHistogram::default(),
            cache: Mutex::new(CacheStats::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub edges_ms: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub pages_total: usize,
    pub pages_free: usize,
    pub pages_per_sequence: std::collections::BTreeMap<u64, usize>,
    pub eviction_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests_admitted: u64,
    pub requests_completed: u64,
    pub requests_failed: u64,
    pub preemptions: u64,
    pub tokens: u64,
    pub tokens_per_sec: f64,
    pub uptime_s: f64,
    pub first_packet_latency: HistogramSnapshot,
    pub cache: CacheSnapshot,
}

impl Metrics {
    pub fn set_cache(&self, stats: CacheStats) {
        *self.cache.lock().unwrap() = stats;
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let uptime = self.started.elapsed().as_secs_f64();
        let tokens = self.tokens.load(Ordering::Relaxed);
        let counts = self.first_packet.counts();
        let cache = self.cache.lock().unwrap().clone();
        MetricsSnapshot {
            requests_admitted: self.admitted.load(Ordering::Relaxed),
            requests_completed: self.completed.load(Ordering::Relaxed),
            requests_failed: self.failed.load(Ordering::Relaxed),
            preemptions: self.preemptions.load(Ordering::Relaxed),
            tokens,
            tokens_per_sec: if uptime > 0.0 { tokens as f64 / uptime } else { 0.0 },
            uptime_s: uptime,
            first_packet_latency: HistogramSnapshot {
                edges_ms: LATENCY_EDGES_MS.to_vec(),
                total: counts.iter().sum(),
                counts,
            },
            cache: CacheSnapshot {
                pages_total: cache.pages_total,
                pages_free: cache.pages_free,
                pages_per_sequence: cache.pages_per_sequence,
                eviction_count: cache.eviction_count,
            },
        }
    }

    /// Raise a counter to an externally tracked monotone total.
    pub(crate) fn raise(counter: &AtomicU64, total: u64) {
        counter.fetch_max(total, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_edges() {
        let h = LatencyHistogram::default();
        for ms in [0.5, 1.0, 1.5, 300.0, 300.1, 5000.0] {
            h.record(ms);
        }
        let c = h.counts();
        assert_eq!(c.len(), 12);
        assert_eq!(c[0], 2); // 0.5, 1.0
        assert_eq!(c[1], 1); // 1.5
        assert_eq!(c[8], 1); // 300.0 in (200, 300]
        assert_eq!(c[9], 1); // 300.1
        assert_eq!(c[11], 1);
    }

    #[test]
    fn fresh_snapshot_is_zero() {
        let s = Metrics::default().snapshot();
        assert_eq!(s.requests_admitted + s.requests_completed + s.requests_failed, 0);
        assert_eq!(s.first_packet_latency.total, 0);
        assert_eq!(s.first_packet_latency.edges_ms.len(), 11);
    }
}
