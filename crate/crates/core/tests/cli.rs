use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use codecserve::config::Config;
use codecserve::server::client::Client;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_codecserve"));
    c.env_remove(codecserve::config::CONFIG_ENV);
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn synth_round_trips_through_wav() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("demo.wav");
    let phones = fixture("demo.phones");
    let o = run(&["synth", "--phones", phones.to_str().unwrap(), "--max-new-tokens", "32", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("utterances=2") && stdout.contains("roundtrip=ok"), "{stdout}");
    let wav = codecserve::toycodec::read_wav(&out).unwrap();
    assert_eq!(wav.sample_rate, Config::default().codec.sample_rate);
    assert!(!wav.samples.is_empty());

    // the written WAV is itself a valid prompt
    let prompted = dir.path().join("prompted.wav");
    let o = run(&[
        "synth",
        "--phones",
        phones.to_str().unwrap(),
        "--prompt",
        out.to_str().unwrap(),
        "--max-new-tokens",
        "8",
        "--out",
        prompted.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o.stderr));
}

#[test]
fn synth_errors_name_their_cause() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.wav");
    let phones = fixture("demo.phones");
    let missing = dir.path().join("nope").join("prompt.wav");
    let o = run(&["synth", "--phones", phones.to_str().unwrap(), "--prompt", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains(missing.to_str().unwrap()), "{}", text(&o.stderr));

    let (a, b) = (dir.path().join("a.tkla"), dir.path().join("b.tkla"));
    for (name, path) in [("a", &a), ("b", &b)] {
        let o = run(&["adapter", "pack", "--name", name, "--kind", "speaker", "--rank", "2", "--out", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let o = run(&[
        "synth",
        "--phones",
        phones.to_str().unwrap(),
        "--adapter",
        a.to_str().unwrap(),
        "--adapter",
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("speaker"), "{}", text(&o.stderr));

    let o = run(&["synth", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_names_the_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"server":{"max_new_tokens":5000}}"#).unwrap();
    let phones = fixture("demo.phones");
    let o = run(&["--config", cfg.to_str().unwrap(), "synth", "--phones", phones.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("model.max_positions") && err.contains("server.max_new_tokens"), "{err}");

    // the same file picked up through the environment
    let o = bin()
        .env(codecserve::config::CONFIG_ENV, &cfg)
        .args(["adapter", "inspect", "whatever.tkla"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("bad-config"));

    std::fs::write(&cfg, r#"{"model":{"d_modle":64}}"#).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "adapter", "inspect", "x"]);
    assert!(text(&o.stderr).contains("d_modle"), "{}", text(&o.stderr));
}

#[test]
fn eval_commands_on_fixtures() {
    let utt = fixture("utterances_100.jsonl");
    let o = run(&["eval", "per", utt.to_str().unwrap()]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pooled"]["raw_edit_distance"], 10);

    let o = run(&["eval", "bcr", utt.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["bcr"].as_f64(), v["bad_rate"].as_f64()), (Some(0.01), Some(0.01)));

    let samples = fixture("samples_100x5.jsonl");
    let ranks = fixture("ranks_100x5.csv");
    let o = run(&["eval", "overlap", "--samples", samples.to_str().unwrap(), "--ranks", ranks.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["overlap"].as_f64(), Some(0.64));

    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let o = run(&["eval", "pairs", samples.to_str().unwrap(), "--out", pa.to_str().unwrap()]);
    assert!(text(&o.stdout).contains("source=objective"));
    run(&["eval", "pairs", samples.to_str().unwrap(), "--source", "subjective", "--ranks", ranks.to_str().unwrap(), "--out", pb.to_str().unwrap()]);
    let o = run(&["eval", "overlap", "--pairs-a", pa.to_str().unwrap(), "--pairs-b", pb.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["overlap"].as_f64(), Some(0.64));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\":\"a\",\"hypothesis\":[1]}\nnot json\n").unwrap();
    let o = run(&["eval", "per", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains(":2:"), "{}", text(&o.stderr));
}

#[test]
fn adapter_pack_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tkla");
    let o = run(&["adapter", "pack", "--name", "dom", "--kind", "domain", "--rank", "3", "--seed", "9", "--out", p.to_str().unwrap()]);
    assert!(o.status.success());
    let o = run(&["adapter", "inspect", p.to_str().unwrap()]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["name"].as_str(), v["rank"].as_u64(), v["kind"].as_str()), (Some("dom"), Some(3), Some("domain")));

    std::fs::write(&p, b"TKLA\x09\0\0\0").unwrap();
    let o = run(&["adapter", "inspect", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("bad-container"));
}

#[test]
fn bench_small_run_passes() {
    let o = run(&["bench", "--requests", "6", "--concurrency", "2", "--max-new-tokens", "16"]);
    assert!(o.status.success(), "{}{}", text(&o.stdout), text(&o.stderr));
    assert!(text(&o.stdout).contains("result=PASS"));
}

#[test]
fn serve_reports_checksum_and_stops_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("serve.json");
    std::fs::write(&cfg_path, r#"{"server":{"chunk_tokens":4,"max_new_tokens":64}}"#).unwrap();
    let mut child = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(first["event"], "listening");

    // independent checksum: SHA-256 of the canonical JSON of the effective
    // config, command-line overrides included
    let mut resolved = Config::load(&cfg_path).unwrap();
    resolved.server.port = 0;
    let digest = Sha256::digest(serde_json::to_vec(&resolved).unwrap());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(first["config_checksum"].as_str(), Some(hex.as_str()));
    assert_ne!(hex, Config::default().checksum());

    let addr: std::net::SocketAddr = first["addr"].as_str().unwrap().parse().unwrap();
    let mut client = Client::connect(addr).unwrap();
    let mut req = codecserve::server::protocol::SynthesizeRequest::new(vec![1, 2, 3]);
    req.decode = Some(codecserve::codeclm::DecodeParams::greedy(9));
    let r = client.synthesize(&req).unwrap();
    assert_eq!(r.audio_frames, r.done.tokens.div_ceil(4));
    drop(client);

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    assert!(exit.success());
    let last: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(last["event"], "stopped");
}
