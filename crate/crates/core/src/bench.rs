//! Load generator driving the wire protocol.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codeclm::DecodeParams;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::server::client::Client;
use crate::server::metrics::HistogramSnapshot;
use crate::server::protocol::SynthesizeRequest;
use crate::server::{self, ServerParts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub concurrency: usize,
    pub requests: usize,
    /// Inclusive range of phonemes per request.
    pub phones_min: usize,
    pub phones_max: usize,
    /// `None` leaves the server's default in force.
    pub max_new_tokens: Option<usize>,
    pub latency_budget_ms: f64,
    pub seed: u64,
    pub adapters: Vec<String>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            requests: 50,
            phones_min: 20,
            phones_max: 20,
            max_new_tokens: None,
            latency_budget_ms: 300.0,
            seed: 1,
            adapters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub requests: usize,
    pub completed: usize,
    pub failures: usize,
    pub first_packet_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    pub preemptions: u64,
    pub wall_s: f64,
    pub server_histogram: Option<HistogramSnapshot>,
    pub latency_budget_ms: f64,
    pub pass: bool,
    /// Codec tokens of every request, by request number.
    pub outputs: Vec<Option<Vec<u32>>>,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// The deterministic request list for `opts`.
pub fn make_requests(opts: &BenchOptions, phoneme_count: u32) -> Result<Vec<SynthesizeRequest>> {
    if opts.phones_min == 0 || opts.phones_min > opts.phones_max {
        return Err(Error::invalid("phone length range must satisfy 1 <= min <= max"));
    }
    let mut rng = SplitMix64::new(opts.seed);
    Ok((0..opts.requests)
        .map(|_| {
            let span = (opts.phones_max - opts.phones_min + 1) as u64;
            let n = opts.phones_min + rng.below(span) as usize;
            let phones = (0..n).map(|_| rng.below(phoneme_count as u64) as u32).collect();
            let mut req = SynthesizeRequest::new(phones);
            req.decode = opts.max_new_tokens.map(DecodeParams::greedy);
            req.adapters = opts.adapters.clone();
            req.return_tokens = true;
            req
        })
        .collect())
}

/// Run `opts` against a live server.
pub fn run(addr: SocketAddr, opts: &BenchOptions, phoneme_count: u32) -> Result<BenchReport> {
    if opts.concurrency == 0 {
        return Err(Error::invalid("concurrency must be >= 1"));
    }
    let requests = Arc::new(make_requests(opts, phoneme_count)?);
    let next = Arc::new(AtomicUsize::new(0));
    // per request: first-packet ms, tokens, preemptions
    type Slot = Option<(f64, Vec<u32>, u32)>;
    let results: Arc<Mutex<Vec<Slot>>> = Arc::new(Mutex::new(vec![None; requests.len()]));
    let started = Instant::now();
    let workers: Vec<_> = (0..opts.concurrency)
        .map(|_| {
            let (requests, next, results) = (Arc::clone(&requests), Arc::clone(&next), Arc::clone(&results));
            std::thread::spawn(move || {
                let mut client = Client::connect(addr).ok();
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let Some(c) = client.as_mut() else { continue };
                    match c.synthesize(&requests[i]) {
                        Ok(r) => {
                            if let Some(fp) = r.first_packet {
                                results.lock().unwrap()[i] =
                                    Some((fp.as_secs_f64() * 1e3, r.tokens, r.done.preemptions));
                            }
                        }
                        Err(e) if e.code() == "bad-request" || e.code() == "io-error" => {
                            // transport trouble; reconnect for the next request
                            client = Client::connect(addr).ok();
                        }
                        Err(_) => {}
                    }
                }
            })
        })
        .collect();
    for w in workers {
        let _ = w.join();
    }
    let wall = started.elapsed().as_secs_f64();
    let results = Arc::try_unwrap(results).unwrap().into_inner().unwrap();
    let mut latencies: Vec<f64> = results.iter().flatten().map(|r| r.0).collect();
    let tokens: usize = results.iter().flatten().map(|r| r.1.len()).sum();
    let preemptions: u64 = results.iter().flatten().map(|r| r.2 as u64).sum();
    let server_histogram = Client::connect(addr)
        .ok()
        .and_then(|mut c| c.metrics().ok())
        .map(|m| m.first_packet_latency);
    let first_packet_ms = latencies.clone();
    latencies.sort_by(f64::total_cmp);
    let completed = latencies.len();
    let p95 = percentile(&latencies, 95.0);
    Ok(BenchReport {
        requests: requests.len(),
        completed,
        failures: requests.len() - completed,
        first_packet_ms,
        p50_ms: percentile(&latencies, 50.0),
        p95_ms: p95,
        p99_ms: percentile(&latencies, 99.0),
        tokens,
        tokens_per_sec: if wall > 0.0 { tokens as f64 / wall } else { 0.0 },
        preemptions,
        wall_s: wall,
        server_histogram,
        latency_budget_ms: opts.latency_budget_ms,
        pass: completed == requests.len() && completed > 0 && p95 < opts.latency_budget_ms,
        outputs: results.into_iter().map(|r| r.map(|x| x.1)).collect(),
    })
}

/// Start a server from `config` on an ephemeral local port, bench it, and
/// shut it down.
pub fn run_in_process(config: &Config, opts: &BenchOptions) -> Result<BenchReport> {
    let model = Arc::new(config.build_model()?);
    let mut settings = config.server_settings();
    settings.bind = "127.0.0.1".into();
    settings.port = 0;
    let handle = server::start(ServerParts {
        registry: config.build_registry()?,
        codec: config.build_codec()?,
        pages: config.page_config()?,
        scheduler: config.scheduler.clone(),
        settings,
        event_log: None,
        model,
    })?;
    let report = run(handle.addr(), opts, config.vocab.phoneme_count);
    handle.shutdown();
    report
}

impl BenchReport {
    pub fn summary_line(&self) -> String {
        format!(
            "first-packet p50={:.1}ms p95={:.1}ms p99={:.1}ms budget={:.0}ms completed={}/{} tokens={} tok/s={:.1} preemptions={} result={}",
            self.p50_ms,
            self.p95_ms,
            self.p99_ms,
            self.latency_budget_ms,
            self.completed,
            self.requests,
            self.tokens,
            self.tokens_per_sec,
            self.preemptions,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_ordered() {
        let mut rng = SplitMix64::new(5);
        for n in 1..50 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() * 100.0).collect();
            v.sort_by(f64::total_cmp);
            let (a, b, c) = (percentile(&v, 50.0), percentile(&v, 95.0), percentile(&v, 99.0));
            assert!(a <= b && b <= c);
        }
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.0);
    }

    #[test]
    fn request_list_deterministic() {
        let o = BenchOptions {
            phones_min: 3,
            phones_max: 9,
            ..Default::default()
        };
        let a = make_requests(&o, 128).unwrap();
        assert_eq!(a, make_requests(&o, 128).unwrap());
        assert!(a.iter().all(|r| (3..=9).contains(&r.phones.len())));
    }
}
