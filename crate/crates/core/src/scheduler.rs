//! Continuous-batching scheduler.
//!
//! Each step is either a prefill of one queued request (its whole prefix,
//! plus any tokens it generated before being preempted) or a decode step
//! that advances every decoding request by one token, each row with its own
//! adapter stack. Prefill wins when a queued request fits in the free
//! pages. When a decode row cannot claim a page, a victim chosen by the
//! [`PreemptPolicy`] is evicted and requeued; it later recomputes its KV
//! from the retained tokens, so its output is unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codeclm::{DecodeParams, Input, LoraAdapter, Model, TokenSelector};
use crate::error::{Error, Result};
use crate::kvcache::{CacheStats, KvStore, PageConfig, PagedKvCache};
use crate::server::registry::AdapterRegistry;
use crate::tokenspace::{ComposedSequence, E, S};

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptPolicy {
    /// Evict the decoding request that arrived last.
    #[default]
    YoungestFirst,
    /// Evict the decoding request with the fewest generated tokens.
    LeastProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub max_batch: usize,
    pub queue_capacity: usize,
    pub preempt_policy: PreemptPolicy,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            max_batch: 8,
            queue_capacity: 256,
            preempt_policy: PreemptPolicy::YoungestFirst,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub prefix: ComposedSequence,
    pub conditions: Vec<Vec<f32>>,
    pub adapters: Vec<String>,
    pub decode: DecodeParams,
    pub streaming: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Queued,
    Prefill,
    Decode,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestState {
    pub phase: Phase,
    pub tokens_emitted: usize,
    pub preemptions: u32,
    pub arrival_us: u64,
    pub first_token_us: Option<u64>,
    pub completion_us: Option<u64>,
    pub terminated: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub kind: StepKind,
    pub members: Vec<RequestId>,
    /// Adapter names per member, in application order.
    pub adapter_stacks: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Admitted,
    Prefill { positions: usize },
    Token { token: u32 },
    Completed { terminated: bool },
    Preempted,
    Failed { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineEvent {
    pub t_us: u64,
    pub request: RequestId,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Immutable view of a request handed outside the scheduling loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestSnapshot {
    pub id: RequestId,
    pub state: RequestState,
    pub generated: Vec<u32>,
}

struct Record {
    request: Request,
    adapters: Vec<Arc<LoraAdapter>>,
    state: RequestState,
    selector: TokenSelector,
    generated: Vec<u32>,
    arrival_seq: u64,
}

impl Record {
    /// Positions a (re)prefill has to write: conditions, prefix, and every
    /// generated token except the newest, which is the next input.
    fn prefill_positions(&self) -> usize {
        self.request.prefix.total_positions() + self.generated.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EngineCounters {
    pub admitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub preemptions: u64,
    pub tokens: u64,
}

pub struct Engine {
    model: Arc<Model>,
    registry: Arc<AdapterRegistry>,
    cache: PagedKvCache,
    config: SchedulerConfig,
    records: BTreeMap<RequestId, Record>,
    /// Queued requests ordered by (arrival sequence, id).
    queue: BTreeSet<(u64, RequestId)>,
    /// Decoding requests in arrival order.
    decoding: Vec<RequestId>,
    next_id: RequestId,
    next_arrival: u64,
    started: Instant,
    counters: EngineCounters,
    event_log: Option<Box<dyn Write + Send>>,
}

impl Engine {
    pub fn new(
        model: Arc<Model>,
        registry: Arc<AdapterRegistry>,
        pages: PageConfig,
        config: SchedulerConfig,
    ) -> Result<Self> {
        if pages.payload_len != model.config().kv_payload_len() {
            return Err(Error::invalid(format!(
                "page payload {} does not match model payload {}",
                pages.payload_len,
                model.config().kv_payload_len()
            )));
        }
        if config.max_batch == 0 {
            return Err(Error::Config {
                field: "scheduler.max_batch".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(Self {
            model,
            registry,
            cache: PagedKvCache::new(pages)?,
            config,
            records: BTreeMap::new(),
            queue: BTreeSet::new(),
            decoding: Vec::new(),
            next_id: 1,
            next_arrival: 0,
            started: Instant::now(),
            counters: EngineCounters::default(),
            event_log: None,
        })
    }

    /// One JSON line per event: `t_us`, `request`, `kind` and payload.
    pub fn set_event_log(&mut self, sink: Box<dyn Write + Send>) {
        self.event_log = Some(sink);
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn registry(&self) -> &Arc<AdapterRegistry> {
        &self.registry
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn counters(&self) -> &EngineCounters {
        &self.counters
    }

    pub fn queued_len(&self) -> usize {
        self.queue.len()
    }

    pub fn decoding_len(&self) -> usize {
        self.decoding.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.decoding.is_empty()
    }

    fn now_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    pub fn snapshot(&self, id: RequestId) -> Option<RequestSnapshot> {
        self.records.get(&id).map(|r| RequestSnapshot {
            id,
            state: r.state.clone(),
            generated: r.generated.clone(),
        })
    }

    /// Drop the record of a finished request.
    pub fn take_finished(&mut self, id: RequestId) -> Option<RequestSnapshot> {
        let snap = self.snapshot(id)?;
        if matches!(snap.state.phase, Phase::Complete | Phase::Failed) {
            self.records.remove(&id);
            Some(snap)
        } else {
            None
        }
    }

    pub fn admit(&mut self, request: Request) -> Result<RequestId> {
        let adapters = self.registry.resolve(&request.adapters)?;
        let cfg = self.model.config();
        if request.prefix.token_ids().last() != Some(&S) || request.prefix.is_complete() {
            return Err(Error::invalid("request prefix must end at S"));
        }
        if request.prefix.condition_len() != cfg.condition_len
            || request.conditions.len() != cfg.condition_len
            || request.conditions.iter().any(|c| c.len() != cfg.d_model)
        {
            return Err(Error::invalid(format!(
                "request needs {} condition embeddings of width {}",
                cfg.condition_len, cfg.d_model
            )));
        }
        request.decode.validate(self.model.vocab_size())?;
        let last_position = request.prefix.total_positions() + request.decode.max_new_tokens.saturating_sub(1);
        if last_position > cfg.max_positions {
            return Err(Error::invalid(format!(
                "prefix of {} positions plus max_new_tokens {} exceeds max_positions {}",
                request.prefix.total_positions(),
                request.decode.max_new_tokens,
                cfg.max_positions
            )));
        }
        if self.queue.len() >= self.config.queue_capacity {
            return Err(Error::QueueFull(self.config.queue_capacity));
        }
        let id = self.next_id;
        self.next_id += 1;
        let arrival_seq = self.next_arrival;
        self.next_arrival += 1;
        let now = self.now_us();
        let selector = TokenSelector::new(request.decode.clone());
        self.records.insert(
            id,
            Record {
                request,
                adapters,
                state: RequestState {
                    phase: Phase::Queued,
                    tokens_emitted: 0,
                    preemptions: 0,
                    arrival_us: now,
                    first_token_us: None,
                    completion_us: None,
                    terminated: false,
                    error: None,
                },
                selector,
                generated: Vec::new(),
                arrival_seq,
            },
        );
        self.queue.insert((arrival_seq, id));
        self.counters.admitted += 1;
        let ev = self.event(id, EventKind::Admitted);
        self.log(&[ev]);
        Ok(id)
    }

    pub fn plan_step(&self) -> Option<BatchPlan> {
        let free = self.cache.pages_free();
        let pages = self.cache.config();
        for &(_, id) in &self.queue {
            let r = &self.records[&id];
            if pages.pages_for(r.prefill_positions()) <= free {
                return Some(self.plan(StepKind::Prefill, vec![id]));
            }
        }
        if self.decoding.is_empty() {
            return None;
        }
        let members = self
            .decoding
            .iter()
            .take(self.config.max_batch)
            .copied()
            .collect();
        Some(self.plan(StepKind::Decode, members))
    }

    fn plan(&self, kind: StepKind, members: Vec<RequestId>) -> BatchPlan {
        let adapter_stacks = members
            .iter()
            .map(|id| {
                self.records[id]
                    .adapters
                    .iter()
                    .map(|a| a.name.clone())
                    .collect()
            })
            .collect();
        BatchPlan {
            kind,
            members,
            adapter_stacks,
        }
    }

    /// Plan and execute one step. Empty when idle.
    pub fn step(&mut self) -> Vec<EngineEvent> {
        let mut events = self.fail_unservable();
        if let Some(plan) = self.plan_step() {
            events.extend(self.execute_step(&plan));
        }
        self.log(&events);
        events
    }

    /// Queued requests whose prefill cannot fit even in an empty pool.
    fn fail_unservable(&mut self) -> Vec<EngineEvent> {
        let pages = self.cache.config();
        let doomed: Vec<RequestId> = self
            .queue
            .iter()
            .map(|&(_, id)| id)
            .filter(|id| pages.pages_for(self.records[id].prefill_positions()) > pages.num_pages)
            .collect();
        doomed
            .into_iter()
            .map(|id| {
                let needed = pages.pages_for(self.records[&id].prefill_positions());
                self.fail(
                    id,
                    Error::ResourceExhausted(format!(
                        "prefill needs {needed} pages, pool has {}",
                        pages.num_pages
                    )),
                )
            })
            .collect()
    }

    pub fn execute_step(&mut self, plan: &BatchPlan) -> Vec<EngineEvent> {
        let mut events = Vec::new();
        match plan.kind {
            StepKind::Prefill => {
                for &id in &plan.members {
                    self.prefill(id, &mut events);
                }
            }
            StepKind::Decode => {
                for &id in &plan.members {
                    self.decode_row(id, &mut events);
                }
            }
        }
        events
    }

    fn prefill(&mut self, id: RequestId, events: &mut Vec<EngineEvent>) {
        let Some(r) = self.records.get(&id) else {
            return;
        };
        if r.state.phase != Phase::Queued {
            return;
        }
        self.queue.remove(&(r.arrival_seq, id));
        if r.request.decode.max_new_tokens == 0 {
            events.push(self.complete(id, false));
            return;
        }
        let r = self.records.get_mut(&id).unwrap();
        r.state.phase = Phase::Prefill;
        let positions = r.prefill_positions();
        let mut tokens = r.request.prefix.token_ids().to_vec();
        tokens.extend_from_slice(&r.generated);
        let inputs = Model::prefix_inputs(&r.request.conditions, &tokens);
        let result = self
            .cache
            .allocate_sequence(id)
            .map(|_| ())
            .and_then(|_| self.model.forward(&r.adapters, &inputs, &mut self.cache, id));
        events.push(self.event(id, EventKind::Prefill { positions }));
        match result {
            Ok(logits) => self.accept_logits(id, &logits, events),
            Err(e) => events.push(self.fail(id, e)),
        }
    }

    fn decode_row(&mut self, id: RequestId, events: &mut Vec<EngineEvent>) {
        loop {
            match self.records.get(&id) {
                Some(r) if r.state.phase == Phase::Decode => {}
                _ => return, // preempted or failed earlier in this step
            }
            match self.cache.ensure_capacity(id, 1) {
                Ok(()) => break,
                Err(Error::OutOfPages { .. }) => match self.choose_victim(id) {
                    Some(victim) => events.push(self.evict(victim)),
                    None => {
                        let err = Error::ResourceExhausted(format!(
                            "request {id} needs a page and nothing else is evictable"
                        ));
                        events.push(self.fail(id, err));
                        return;
                    }
                },
                Err(e) => {
                    events.push(self.fail(id, e));
                    return;
                }
            }
        }
        let r = &self.records[&id];
        let last = *r.generated.last().expect("decoding request has a token");
        match self
            .model
            .forward(&r.adapters, &[Input::Token(last)], &mut self.cache, id)
        {
            Ok(logits) => self.accept_logits(id, &logits, events),
            Err(e) => events.push(self.fail(id, e)),
        }
    }

    fn accept_logits(&mut self, id: RequestId, logits: &[f32], events: &mut Vec<EngineEvent>) {
        let now = self.now_us();
        let r = self.records.get_mut(&id).unwrap();
        let tok = match r.selector.select(logits) {
            Ok(t) => t,
            Err(e) => {
                events.push(self.fail(id, e));
                return;
            }
        };
        r.generated.push(tok);
        r.state.tokens_emitted = r.generated.len();
        r.state.first_token_us.get_or_insert(now);
        let done = tok == E || r.generated.len() >= r.request.decode.max_new_tokens;
        let was_decoding = r.state.phase == Phase::Decode;
        self.counters.tokens += 1;
        events.push(self.event(id, EventKind::Token { token: tok }));
        if done {
            if was_decoding {
                self.decoding.retain(|&d| d != id);
            }
            events.push(self.complete(id, tok == E));
        } else if !was_decoding {
            let r = self.records.get_mut(&id).unwrap();
            r.state.phase = Phase::Decode;
            let seq = r.arrival_seq;
            let at = self
                .decoding
                .partition_point(|d| self.records[d].arrival_seq < seq);
            self.decoding.insert(at, id);
        }
    }

    fn choose_victim(&self, trigger: RequestId) -> Option<RequestId> {
        if self.decoding.len() <= 1 && self.decoding.first().is_none_or(|&d| d == trigger) {
            return None;
        }
        let key = |id: &RequestId| {
            let r = &self.records[id];
            match self.config.preempt_policy {
                PreemptPolicy::YoungestFirst => (u64::MAX - r.arrival_seq, 0),
                PreemptPolicy::LeastProgress => (r.generated.len() as u64, u64::MAX - r.arrival_seq),
            }
        };
        self.decoding.iter().copied().min_by_key(key)
    }

    /// Evict a decoding request: free its pages and requeue it with its
    /// generated tokens retained.
    pub fn preempt(&mut self, id: RequestId) -> Result<EngineEvent> {
        match self.records.get(&id) {
            Some(r) if r.state.phase == Phase::Decode => Ok(self.evict(id)),
            Some(_) => Err(Error::invalid(format!("request {id} is not decoding"))),
            None => Err(Error::invalid(format!("unknown request {id}"))),
        }
    }

    fn evict(&mut self, id: RequestId) -> EngineEvent {
        self.cache.evict(id).expect("decoding request owns a sequence");
        self.decoding.retain(|&d| d != id);
        let r = self.records.get_mut(&id).unwrap();
        r.state.phase = Phase::Queued;
        r.state.preemptions += 1;
        self.queue.insert((r.arrival_seq, id));
        self.counters.preemptions += 1;
        self.event(id, EventKind::Preempted)
    }

    fn complete(&mut self, id: RequestId, terminated: bool) -> EngineEvent {
        let now = self.now_us();
        if self.cache.contains(id) {
            self.cache.free_sequence(id).expect("sequence present");
        }
        let r = self.records.get_mut(&id).unwrap();
        r.state.phase = Phase::Complete;
        r.state.terminated = terminated;
        r.state.completion_us = Some(now);
        self.counters.completed += 1;
        self.event(id, EventKind::Completed { terminated })
    }

    fn fail(&mut self, id: RequestId, err: Error) -> EngineEvent {
        let now = self.now_us();
        if self.cache.contains(id) {
            let _ = self.cache.free_sequence(id);
        }
        self.decoding.retain(|&d| d != id);
        let r = self.records.get_mut(&id).unwrap();
        self.queue.remove(&(r.arrival_seq, id));
        r.state.phase = Phase::Failed;
        r.state.completion_us = Some(now);
        r.state.error = Some(err.to_string());
        self.counters.failed += 1;
        self.event(
            id,
            EventKind::Failed {
                code: err.code().to_string(),
                message: err.to_string(),
            },
        )
    }

    fn event(&self, request: RequestId, kind: EventKind) -> EngineEvent {
        EngineEvent {
            t_us: self.now_us(),
            request,
            kind,
        }
    }

    fn log(&mut self, events: &[EngineEvent]) {
        if let Some(sink) = &mut self.event_log {
            for ev in events {
                if let Ok(line) = serde_json::to_string(ev) {
                    let _ = writeln!(sink, "{line}");
                }
            }
        }
    }

    /// Step until idle or `max_steps`; returns the number of steps taken.
    pub fn run_until_idle(&mut self, max_steps: usize) -> usize {
        let mut steps = 0;
        while !self.is_idle() && steps < max_steps {
            self.step();
            steps += 1;
        }
        steps
    }
}

/// Final token stream per request from an event list, in emission order.
pub fn collect_tokens(events: &[EngineEvent]) -> BTreeMap<RequestId, Vec<u32>> {
    let mut out: BTreeMap<RequestId, Vec<u32>> = BTreeMap::new();
    for ev in events {
        if let EventKind::Token { token } = ev.kind {
            out.entry(ev.request).or_default().push(token);
        }
    }
    out
}
