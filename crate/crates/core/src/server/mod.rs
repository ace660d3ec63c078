//! Streaming synthesis service.
//!
//! One acceptor thread hands each TCP connection to its own handler thread.
//! Handlers submit requests to a single scheduling-loop thread that owns
//! the [`Engine`] and fans engine events back out through per-request
//! channels. Audio leaves the handler as `0x02` frames of whole PCM frames,
//! `chunk_tokens` codec tokens at a time.

pub mod client;
pub mod metrics;
pub mod protocol;
pub mod registry;
pub mod wire;

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine as _;

use crate::codeclm::{DecodeParams, Model};
use crate::error::{Error, Result};
use crate::kvcache::PageConfig;
use crate::scheduler::{Engine, EngineEvent, EventKind, Request, RequestId, SchedulerConfig};
use crate::tokenspace::{compose_inference_prefix, PhonemeSeq};
use crate::toycodec::{self, Codec};

use self::metrics::{Metrics, MetricsSnapshot};
use self::protocol::{
    AdapterAck, ControlMessage, DoneStats, ErrorReply, LoadAdapter, PromptSpec, SynthesizeRequest,
};
use self::registry::AdapterRegistry;
use self::wire::{read_frame, write_frame, Frame, FrameType, WireError};

#[derive(Debug, Clone)]
pub struct ServerSettings {
    pub bind: String,
    pub port: u16,
    pub max_frame: usize,
    pub chunk_tokens: usize,
    /// Used when a request carries no decode parameters.
    pub default_max_new_tokens: usize,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 7070,
            max_frame: wire::DEFAULT_MAX_FRAME,
            chunk_tokens: 8,
            default_max_new_tokens: 256,
        }
    }
}

enum LoopMsg {
    Submit {
        request: Request,
        events: Sender<EngineEvent>,
        reply: Sender<Result<RequestId>>,
    },
    Shutdown,
}

/// Everything a connection handler needs; shared across handlers.
pub struct Service {
    model: Arc<Model>,
    codec: Codec,
    registry: Arc<AdapterRegistry>,
    metrics: Arc<Metrics>,
    settings: ServerSettings,
    submit: Mutex<Sender<LoopMsg>>,
}

impl Service {
    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn registry(&self) -> &Arc<AdapterRegistry> {
        &self.registry
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    fn submit(&self, request: Request) -> Result<(RequestId, Receiver<EngineEvent>)> {
        let (ev_tx, ev_rx) = mpsc::channel();
        let (reply_tx, reply_rx) = mpsc::channel();
        self.submit
            .lock()
            .unwrap()
            .send(LoopMsg::Submit {
                request,
                events: ev_tx,
                reply: reply_tx,
            })
            .map_err(|_| Error::ResourceExhausted("scheduler stopped".into()))?;
        let id = reply_rx
            .recv()
            .map_err(|_| Error::ResourceExhausted("scheduler stopped".into()))??;
        Ok((id, ev_rx))
    }

    /// Turn a wire request into an engine request.
    pub fn build_request(&self, req: &SynthesizeRequest) -> Result<Request> {
        let cfg = self.model.config();
        let phones = PhonemeSeq::from_indices(&cfg.vocab, &req.phones)?;
        let prefix = compose_inference_prefix(cfg.condition_len, &phones)?;
        let audio = match &req.prompt {
            PromptSpec::Preset(name) => toycodec::preset_prompt(&self.codec, name)?,
            PromptSpec::Wav { wav_base64 } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(wav_base64)
                    .map_err(|e| Error::invalid(format!("prompt base64: {e}")))?;
                toycodec::parse_wav(&bytes)?
            }
        };
        let conditions = self.codec.prompt_embed(&audio, &self.model)?;
        let decode = req
            .decode
            .clone()
            .unwrap_or_else(|| DecodeParams::greedy(self.settings.default_max_new_tokens));
        let frame_bytes = self.codec.spec().frame_len * 2;
        if !req.stream && decode.max_new_tokens.saturating_mul(frame_bytes) > self.settings.max_frame {
            return Err(Error::invalid(format!(
                "non-streamed audio for {} tokens exceeds the {}-byte frame limit",
                decode.max_new_tokens, self.settings.max_frame
            )));
        }
        let chunk = req.chunk_tokens.unwrap_or(self.settings.chunk_tokens);
        if chunk == 0 || chunk.saturating_mul(frame_bytes) > self.settings.max_frame {
            return Err(Error::invalid(format!("chunk_tokens {chunk} out of range")));
        }
        Ok(Request {
            prefix,
            conditions,
            adapters: req.adapters.clone(),
            decode,
            streaming: req.stream,
        })
    }

    /// Serve one synthesis request onto `out`. Returns the engine id when
    /// the request was admitted.
    pub fn synthesize(
        &self,
        req: &SynthesizeRequest,
        received: Instant,
        out: &mut impl Write,
    ) -> std::result::Result<Option<RequestId>, WireError> {
        let request = match self.build_request(req) {
            Ok(r) => r,
            Err(e) => {
                write_error(out, &e)?;
                return Ok(None);
            }
        };
        let streaming = request.streaming;
        let chunk = req.chunk_tokens.unwrap_or(self.settings.chunk_tokens);
        let (id, events) = match self.submit(request) {
            Ok(x) => x,
            Err(e) => {
                write_error(out, &e)?;
                return Ok(None);
            }
        };
        let vocab = self.model.config().vocab;
        let mut pending: Vec<u32> = Vec::new();
        let mut generated = 0usize;
        let mut codec_tokens = 0usize;
        let mut preemptions = 0u32;
        let mut audio_frames = 0usize;
        let mut first_token_ms = None;
        let mut first_packet_ms = None;

        let flush = |tokens: &mut Vec<u32>,
                         out: &mut dyn Write,
                         audio_frames: &mut usize,
                         first_packet_ms: &mut Option<f64>|
         -> std::result::Result<(), WireError> {
            if req.return_tokens {
                let payload = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
                write_frame(out, &Frame::new(FrameType::Tokens, payload))?;
            }
            let pcm = self.codec.render(tokens).expect("codec indices in range");
            let frame = Frame::new(FrameType::Audio, toycodec::pcm_to_le_bytes(&pcm));
            if first_packet_ms.is_none() {
                let ms = received.elapsed().as_secs_f64() * 1e3;
                *first_packet_ms = Some(ms);
                self.metrics.first_packet.record(ms);
            }
            write_frame(out, &frame)?;
            *audio_frames += 1;
            tokens.clear();
            Ok(())
        };

        for ev in events.iter() {
            match ev.kind {
                EventKind::Token { token } => {
                    generated += 1;
                    first_token_ms.get_or_insert(received.elapsed().as_secs_f64() * 1e3);
                    if let Some(idx) = vocab.codec_index(token) {
                        pending.push(idx);
                        codec_tokens += 1;
                        if streaming && pending.len() == chunk {
                            flush(&mut pending, out, &mut audio_frames, &mut first_packet_ms)?;
                        }
                    }
                }
                EventKind::Preempted => preemptions += 1,
                EventKind::Completed { terminated } => {
                    if !streaming || !pending.is_empty() {
                        flush(&mut pending, out, &mut audio_frames, &mut first_packet_ms)?;
                    }
                    let done = DoneStats {
                        request_id: id,
                        tokens: codec_tokens,
                        generated,
                        terminated,
                        preemptions,
                        audio_frames,
                        first_token_ms,
                        first_packet_ms,
                        total_ms: received.elapsed().as_secs_f64() * 1e3,
                    };
                    write_frame(out, &Frame::json(FrameType::Done, &done))?;
                    return Ok(Some(id));
                }
                EventKind::Failed { ref code, ref message } => {
                    let reply = ErrorReply {
                        code: code.clone(),
                        message: message.clone(),
                    };
                    write_frame(out, &Frame::json(FrameType::Error, &reply))?;
                    return Ok(Some(id));
                }
                EventKind::Admitted | EventKind::Prefill { .. } => {}
            }
        }
        write_error(out, &Error::ResourceExhausted("scheduler stopped".into()))?;
        Ok(Some(id))
    }

    pub fn load_adapter(&self, msg: &LoadAdapter) -> Result<AdapterAck> {
        let bytes = match (&msg.path, &msg.blob_base64) {
            (Some(path), None) => std::fs::read(path).map_err(|e| Error::file(path, e))?,
            (None, Some(blob)) => base64::engine::general_purpose::STANDARD
                .decode(blob)
                .map_err(|e| Error::BadContainer(format!("base64: {e}")))?,
            _ => {
                return Err(Error::invalid(
                    "load_adapter needs exactly one of `path` or `blob_base64`",
                ))
            }
        };
        let info = self.registry.load_bytes(&bytes)?;
        Ok(AdapterAck {
            ok: true,
            name: info.name,
            kind: info.kind,
            rank: info.rank,
            alpha: info.alpha,
            epoch: self.registry.epoch(),
        })
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        self.metrics.snapshot()
    }

    /// Dispatch one inbound frame. `Err` means the connection must close.
    pub fn handle_frame(
        &self,
        frame: Frame,
        received: Instant,
        out: &mut impl Write,
    ) -> std::result::Result<(), WireError> {
        if frame.kind != FrameType::Control {
            return write_error(
                out,
                &Error::Protocol(WireError::Malformed(format!(
                    "clients may only send control frames, got {:?}",
                    frame.kind
                ))),
            );
        }
        let msg: ControlMessage = match serde_json::from_slice(&frame.payload) {
            Ok(m) => m,
            Err(e) => {
                return write_error(out, &Error::Protocol(WireError::Malformed(e.to_string())))
            }
        };
        match msg {
            ControlMessage::Synthesize(req) => {
                self.synthesize(&req, received, out)?;
            }
            ControlMessage::LoadAdapter(l) => match self.load_adapter(&l) {
                Ok(ack) => write_frame(out, &Frame::json(FrameType::Control, &ack))?,
                Err(e) => write_error(out, &e)?,
            },
            ControlMessage::UnloadAdapter { name } => match self.registry.unload(&name) {
                Ok(()) => write_frame(
                    out,
                    &Frame::json(
                        FrameType::Control,
                        &serde_json::json!({"ok": true, "name": name, "epoch": self.registry.epoch()}),
                    ),
                )?,
                Err(e) => write_error(out, &e)?,
            },
            ControlMessage::ListAdapters => write_frame(
                out,
                &Frame::json(FrameType::Control, &serde_json::json!({"adapters": self.registry.list()})),
            )?,
            ControlMessage::Metrics => {
                write_frame(out, &Frame::json(FrameType::Control, &self.metrics_snapshot()))?
            }
        }
        Ok(())
    }
}

fn write_error(out: &mut impl Write, err: &Error) -> std::result::Result<(), WireError> {
    let reply = ErrorReply {
        code: err.code().to_string(),
        message: err.to_string(),
    };
    write_frame(out, &Frame::json(FrameType::Error, &reply))
}

fn scheduling_loop(mut engine: Engine, rx: Receiver<LoopMsg>, metrics: Arc<Metrics>) {
    let mut subscribers: HashMap<RequestId, Sender<EngineEvent>> = HashMap::new();
    let mut stopping = false;
    let publish = |engine: &Engine| {
        let c = engine.counters();
        Metrics::raise(&metrics.admitted, c.admitted);
        Metrics::raise(&metrics.completed, c.completed);
        Metrics::raise(&metrics.failed, c.failed);
        Metrics::raise(&metrics.preemptions, c.preemptions);
        Metrics::raise(&metrics.tokens, c.tokens);
        metrics.set_cache(engine.cache_stats());
    };
    publish(&engine);
    loop {
        let mut handle = |msg: LoopMsg, engine: &mut Engine, stopping: &mut bool| match msg {
            LoopMsg::Submit {
                request,
                events,
                reply,
            } => {
                if *stopping {
                    let _ = reply.send(Err(Error::ResourceExhausted("server shutting down".into())));
                    return;
                }
                match engine.admit(request) {
                    Ok(id) => {
                        subscribers.insert(id, events);
                        let _ = reply.send(Ok(id));
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e));
                    }
                }
            }
            LoopMsg::Shutdown => *stopping = true,
        };
        if engine.is_idle() {
            if stopping {
                break;
            }
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(msg) => handle(msg, &mut engine, &mut stopping),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        while let Ok(msg) = rx.try_recv() {
            handle(msg, &mut engine, &mut stopping);
        }
        let events = engine.step();
        // counters first, so a client that has seen its Done frame also
        // sees its request counted
        publish(&engine);
        for ev in events {
            let finished = matches!(ev.kind, EventKind::Completed { .. } | EventKind::Failed { .. });
            if let Some(tx) = subscribers.get(&ev.request) {
                let _ = tx.send(ev.clone());
            }
            if finished {
                subscribers.remove(&ev.request);
                engine.take_finished(ev.request);
            }
        }
    }
}

pub struct ServerParts {
    pub model: Arc<Model>,
    pub codec: Codec,
    pub registry: Arc<AdapterRegistry>,
    pub pages: PageConfig,
    pub scheduler: SchedulerConfig,
    pub settings: ServerSettings,
    pub event_log: Option<Box<dyn Write + Send>>,
}

pub struct ServerHandle {
    addr: SocketAddr,
    service: Arc<Service>,
    stopping: Arc<AtomicBool>,
    active: Arc<AtomicUsize>,
    acceptor: Option<JoinHandle<()>>,
    scheduler: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Stop accepting, let in-flight requests finish, then stop the
    /// scheduling loop.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // unblock accept()
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        while self.active.load(Ordering::SeqCst) > 0 {
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.service.submit.lock().unwrap().send(LoopMsg::Shutdown);
        if let Some(h) = self.scheduler.take() {
            let _ = h.join();
        }
    }

    /// Block until `flag` is raised, then shut down.
    pub fn run_until(mut self, flag: Arc<AtomicBool>) {
        while !flag.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(50));
        }
        self.stop();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn start(parts: ServerParts) -> Result<ServerHandle> {
    let ServerParts {
        model,
        codec,
        registry,
        pages,
        scheduler,
        settings,
        event_log,
    } = parts;
    let listener = TcpListener::bind((settings.bind.as_str(), settings.port))?;
    let addr = listener.local_addr()?;
    let metrics = Arc::new(Metrics::default());
    let mut engine = Engine::new(Arc::clone(&model), Arc::clone(&registry), pages, scheduler)?;
    if let Some(log) = event_log {
        engine.set_event_log(log);
    }
    let (tx, rx) = mpsc::channel();
    let sched_metrics = Arc::clone(&metrics);
    let sched = std::thread::Builder::new()
        .name("scheduler".into())
        .spawn(move || scheduling_loop(engine, rx, sched_metrics))?;

    let service = Arc::new(Service {
        model,
        codec,
        registry,
        metrics,
        settings,
        submit: Mutex::new(tx),
    });
    let stopping = Arc::new(AtomicBool::new(false));
    let active = Arc::new(AtomicUsize::new(0));
    let acceptor = {
        let service = Arc::clone(&service);
        let stopping = Arc::clone(&stopping);
        let active = Arc::clone(&active);
        std::thread::Builder::new().name("acceptor".into()).spawn(move || {
            for conn in listener.incoming() {
                if stopping.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let service = Arc::clone(&service);
                let stopping = Arc::clone(&stopping);
                let active = Arc::clone(&active);
                active.fetch_add(1, Ordering::SeqCst);
                let spawned = std::thread::Builder::new()
                    .name("conn".into())
                    .spawn({
                        let active = Arc::clone(&active);
                        move || {
                            let _ = serve_connection(&service, stream, &stopping);
                            active.fetch_sub(1, Ordering::SeqCst);
                        }
                    });
                if spawned.is_err() {
                    active.fetch_sub(1, Ordering::SeqCst);
                }
            }
        })?
    };
    Ok(ServerHandle {
        addr,
        service,
        stopping,
        active,
        acceptor: Some(acceptor),
        scheduler: Some(sched),
    })
}

fn serve_connection(
    service: &Service,
    stream: TcpStream,
    stopping: &AtomicBool,
) -> std::result::Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = BufWriter::new(stream.try_clone()?);
    let max = service.settings.max_frame;
    loop {
        // wait for the next frame without consuming bytes, so an idle
        // connection notices shutdown
        stream.set_read_timeout(Some(Duration::from_millis(100)))?;
        let mut probe = [0u8; 1];
        match stream.peek(&mut probe) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                if stopping.load(Ordering::SeqCst) {
                    return Ok(());
                }
                continue;
            }
            Err(e) => return Err(e.into()),
        }
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let frame = match read_frame(&mut reader, max) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(WireError::Io(e)) => return Err(WireError::Io(e)),
            Err(e) => {
                // framing is lost; report and close
                let _ = write_error(&mut writer, &Error::Protocol(e));
                return Ok(());
            }
        };
        let received = Instant::now();
        service.handle_frame(frame, received, &mut writer)?;
    }
}
