use std::sync::Arc;

use codecserve::codeclm::{AdapterKind, DecodeParams, LoraAdapter};
use codecserve::config::Config;
use codecserve::server::client::Client;
use codecserve::server::protocol::SynthesizeRequest;
use codecserve::server::wire::{Frame, FrameType};
use codecserve::server::{self, ServerHandle, ServerParts};
use codecserve::tokenspace::VocabLayout;

/// Server whose model can only emit codec tokens, so every request runs to
/// its token budget.
fn start(config: &Config) -> ServerHandle {
    let model = config.build_model().unwrap();
    let vocab: VocabLayout = model.config().vocab;
    let bias = (0..vocab.total_size())
        .map(|id| if vocab.is_codec(id) { 0.0 } else { -1e4 })
        .collect();
    let mut settings = config.server_settings();
    settings.port = 0;
    server::start(ServerParts {
        model: Arc::new(model.with_logit_bias(bias).unwrap()),
        codec: config.build_codec().unwrap(),
        registry: config.build_registry().unwrap(),
        pages: config.page_config().unwrap(),
        scheduler: config.scheduler.clone(),
        settings,
        event_log: None,
    })
    .unwrap()
}

fn request(n: usize) -> SynthesizeRequest {
    let mut r = SynthesizeRequest::new(vec![12, 40, 7, 88, 3]);
    r.decode = Some(DecodeParams::greedy(n));
    r.return_tokens = true;
    r
}

fn frames_until_done(c: &mut Client) -> Vec<Frame> {
    let mut out = Vec::new();
    loop {
        let f = c.recv().unwrap();
        let kind = f.kind;
        out.push(f);
        if matches!(kind, FrameType::Done | FrameType::Error) {
            return out;
        }
    }
}

#[test]
fn streams_in_chunks_and_matches_batch_output() {
    let config = Config::default();
    let handle = start(&config);
    let frame_len = config.codec.frame_len;
    let mut c = Client::connect(handle.addr()).unwrap();

    c.send(&codecserve::server::protocol::ControlMessage::Synthesize(request(20))).unwrap();
    let frames = frames_until_done(&mut c);
    let audio: Vec<usize> = frames
        .iter()
        .filter(|f| f.kind == FrameType::Audio)
        .map(|f| f.payload.len() / 2 / frame_len)
        .collect();
    assert_eq!(audio, [8, 8, 4]);
    let kinds: Vec<FrameType> = frames.iter().map(|f| f.kind).collect();
    use FrameType::*;
    assert_eq!(kinds, [Tokens, Audio, Tokens, Audio, Tokens, Audio, Done]);

    let streamed = c.synthesize(&request(20)).unwrap();
    let mut whole = request(20);
    whole.stream = false;
    let single = c.synthesize(&whole).unwrap();
    assert_eq!(single.audio_frames, 1);
    assert_eq!(streamed.pcm, single.pcm);
    assert_eq!(streamed.tokens, single.tokens);
    assert_eq!(streamed.done.tokens, 20);
    assert!(!streamed.done.terminated);

    let codec = config.build_codec().unwrap();
    assert_eq!(codec.analyze(&streamed.pcm).unwrap(), streamed.tokens);

    let mut small = request(20);
    small.chunk_tokens = Some(3);
    assert_eq!(c.synthesize(&small).unwrap().audio_frames, 7);
    handle.shutdown();
}

#[test]
fn adapter_lifecycle_over_the_wire() {
    let config = Config::default();
    let handle = start(&config);
    let mut c = Client::connect(handle.addr()).unwrap();
    let cfg = config.model_config().unwrap();
    let blob = LoraAdapter::random(&cfg, "spk1", AdapterKind::Speaker, 4, 16.0, 5).to_bytes();

    let ack = c.load_adapter_bytes(&blob).unwrap();
    assert_eq!((ack.name.as_str(), ack.rank), ("spk1", 4));
    let listed = c.list_adapters().unwrap().to_string();
    assert!(listed.contains("spk1"));

    let mut req = request(8);
    req.adapters = vec!["spk1".into()];
    let with = c.synthesize(&req).unwrap();
    assert_eq!(with.done.tokens, 8);

    c.unload_adapter("spk1").unwrap();
    assert_eq!(c.synthesize(&req).unwrap_err().code(), "unknown-adapter");
    assert_eq!(c.unload_adapter("spk1").unwrap_err().code(), "unknown-adapter");

    let mut bad = blob.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert_eq!(c.load_adapter_bytes(&bad).unwrap_err().code(), "bad-container");
    assert_eq!(c.load_adapter_bytes(&blob[..blob.len() / 2]).unwrap_err().code(), "bad-container");

    // the connection survives every error above
    assert_eq!(c.synthesize(&request(4)).unwrap().done.tokens, 4);
    handle.shutdown();
}

#[test]
fn malformed_requests_get_typed_errors() {
    let config = Config::default();
    let handle = start(&config);
    let mut c = Client::connect(handle.addr()).unwrap();

    c.send_raw(&Frame::new(FrameType::Control, b"{\"op\":".to_vec())).unwrap();
    let f = c.recv().unwrap();
    assert_eq!(f.kind, FrameType::Error);
    let v: serde_json::Value = serde_json::from_slice(&f.payload).unwrap();
    assert_eq!(v["code"], "bad-request");

    c.send_raw(&Frame::new(FrameType::Audio, vec![0; 4])).unwrap();
    assert_eq!(c.recv().unwrap().kind, FrameType::Error);

    let mut r = request(4);
    r.phones = vec![100_000];
    assert_eq!(c.synthesize(&r).unwrap_err().code(), "invalid-argument");
    let mut r = request(4);
    r.phones.clear();
    assert_eq!(c.synthesize(&r).unwrap_err().code(), "invalid-argument");
    let mut r = request(4);
    r.chunk_tokens = Some(0);
    assert_eq!(c.synthesize(&r).unwrap_err().code(), "invalid-argument");
    handle.shutdown();
}

#[test]
fn metrics_count_requests() {
    let config = Config::default();
    let handle = start(&config);
    let mut c = Client::connect(handle.addr()).unwrap();
    let m0 = c.metrics().unwrap();
    assert_eq!((m0.requests_admitted, m0.requests_completed, m0.tokens), (0, 0, 0));
    assert_eq!(m0.first_packet_latency.total, 0);
    assert_eq!(m0.first_packet_latency.counts.len(), m0.first_packet_latency.edges_ms.len() + 1);

    c.synthesize(&request(6)).unwrap();
    let m1 = c.metrics().unwrap();
    assert_eq!(m1.requests_completed, 1);
    assert_eq!(m1.first_packet_latency.total, 1);
    assert_eq!(m1.tokens, 6);
    assert_eq!(m1.cache.pages_free, m1.cache.pages_total);

    let mut prev = m1;
    for _ in 0..3 {
        c.synthesize(&request(3)).unwrap();
        let m = c.metrics().unwrap();
        assert!(m.requests_completed > prev.requests_completed);
        assert!(m.tokens >= prev.tokens && m.first_packet_latency.total >= prev.first_packet_latency.total);
        assert!(m.uptime_s >= prev.uptime_s);
        prev = m;
    }
    handle.shutdown();
}

#[test]
fn concurrent_clients_get_their_own_streams() {
    let config = Config::default();
    let handle = start(&config);
    let addr = handle.addr();
    // the same request alone and under concurrency yields the same tokens
    let solo = Client::connect(addr).unwrap().synthesize(&request(12)).unwrap().tokens;
    let workers: Vec<_> = (0..6)
        .map(|i| {
            std::thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                let mut r = request(12);
                if i % 2 == 1 {
                    r.phones = vec![1, 2, 3, 4, 5, 6, 7, 8, 9];
                }
                (i, c.synthesize(&r).unwrap().tokens)
            })
        })
        .collect();
    for w in workers {
        let (i, tokens) = w.join().unwrap();
        assert_eq!(tokens.len(), 12);
        if i % 2 == 0 {
            assert_eq!(tokens, solo);
        }
    }
    handle.shutdown();
}
