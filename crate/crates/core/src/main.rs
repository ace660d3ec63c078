use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use codecserve::bench::{self, BenchOptions};
use codecserve::codeclm::{decode, AdapterKind, DecodeMode, DecodeParams, LoraAdapter};
use codecserve::config::Config;
use codecserve::evalkit::{self, BadCaseConfig, PreferencePair, RatedSample, RatingSource, UtteranceRecord};
use codecserve::kvcache::PagedKvCache;
use codecserve::server::registry::AdapterRegistry;
use codecserve::server::{self, ServerParts};
use codecserve::tokenspace::{compose_inference_prefix, read_phones_file, PhonemeSeq};
use codecserve::toycodec::{self, PromptAudio};
use codecserve::{Error, Result};

#[derive(Parser)]
#[command(name = "codecserve", version, about = "Codec-token TTS engine and streaming server")]
struct Cli {
    /// JSON config file; falls back to $TAKIN_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the streaming synthesis server.
    Serve(ServeArgs),
    /// Synthesize a phoneme file to a WAV offline.
    Synth(SynthArgs),
    /// Measure first-packet latency and throughput over the wire protocol.
    Bench(BenchArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Adapter container tooling.
    #[command(subcommand)]
    Adapter(AdapterCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    /// Append scheduler events as JSON lines.
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Sampled,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    temperature: f32,
    #[arg(long, default_value_t = 50)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// One utterance per line of whitespace-separated phoneme indices.
    #[arg(long)]
    phones: PathBuf,
    /// Prompt WAV (s16le mono).
    #[arg(long, conflicts_with = "preset")]
    prompt: Option<PathBuf>,
    /// Built-in prompt: silence, neutral, bright or low.
    #[arg(long)]
    preset: Option<String>,
    /// TKLA adapter file; at most one per kind.
    #[arg(long = "adapter")]
    adapters: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Server address; without it an in-process server is started.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 50)]
    requests: usize,
    /// Fixed phonemes per request (sets both bounds).
    #[arg(long)]
    phones: Option<usize>,
    #[arg(long, default_value_t = 20)]
    phones_min: usize,
    #[arg(long, default_value_t = 20)]
    phones_max: usize,
    /// Defaults to the server's configured limit.
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long, default_value_t = 300.0)]
    latency_budget: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Adapter names to request (must be loaded on the server).
    #[arg(long = "adapter")]
    adapters: Vec<String>,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// PER of hypothesis against reference tokens, per utterance and pooled.
    Per {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bad-case flags, bad rate and BCR.
    Bcr {
        input: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        frames_per_phone: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Chosen/rejected pairs from rated samples.
    Pairs {
        samples: PathBuf,
        #[arg(long, value_enum, default_value = "objective")]
        source: SourceArg,
        /// Human ranks CSV (sentence_id,sample_index,rank).
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Agreement between objective and subjective pairs.
    Overlap {
        /// Rated samples; pairs are built from both sources.
        #[arg(long, requires = "ranks", conflicts_with_all = ["pairs_a", "pairs_b"])]
        samples: Option<PathBuf>,
        #[arg(long)]
        ranks: Option<PathBuf>,
        /// Prebuilt pair files.
        #[arg(long, requires = "pairs_b")]
        pairs_a: Option<PathBuf>,
        #[arg(long, requires = "pairs_a")]
        pairs_b: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Objective,
    Subjective,
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Write a seeded adapter for the configured model geometry.
    Pack {
        #[arg(long)]
        name: String,
        #[arg(long)]
        kind: AdapterKind,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        #[arg(long, default_value_t = 16.0)]
        alpha: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an adapter's metadata and check it against the config.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = Config::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Serve(a) => serve(config, a),
        Command::Synth(a) => synth(&config, a),
        Command::Bench(a) => run_bench(&config, a),
        Command::Eval(e) => eval(e),
        Command::Adapter(a) => adapter(&config, a),
    }
}

fn serve(mut config: Config, a: ServeArgs) -> Result<ExitCode> {
    if let Some(p) = a.port {
        config.server.port = p;
    }
    if let Some(b) = a.bind {
        config.server.bind = b;
    }
    config.validate()?;
    let event_log: Option<Box<dyn std::io::Write + Send>> = match &a.event_log {
        Some(p) => Some(Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::file(p, e))?,
        ))),
        None => None,
    };
    let handle = server::start(ServerParts {
        model: Arc::new(config.build_model()?),
        codec: config.build_codec()?,
        registry: config.build_registry()?,
        pages: config.page_config()?,
        scheduler: config.scheduler.clone(),
        settings: config.server_settings(),
        event_log,
    })?;
    println!(
        "{}",
        serde_json::json!({
            "event": "listening",
            "addr": handle.addr().to_string(),
            "config_checksum": config.checksum(),
        })
    );
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || flag.store(true, std::sync::atomic::Ordering::SeqCst))
        .map_err(|e| Error::ResourceExhausted(format!("signal handler: {e}")))?;
    handle.run_until(stop);
    println!("{}", serde_json::json!({"event": "stopped"}));
    Ok(ExitCode::SUCCESS)
}

fn load_prompt(codec: &toycodec::Codec, a: &SynthArgs) -> Result<PromptAudio> {
    match (&a.prompt, &a.preset) {
        (Some(p), _) => toycodec::read_wav(p),
        (None, Some(name)) => toycodec::preset_prompt(codec, name),
        (None, None) => toycodec::preset_prompt(codec, "neutral"),
    }
}

fn synth(config: &Config, a: SynthArgs) -> Result<ExitCode> {
    let model = config.build_model()?;
    let codec = config.build_codec()?;
    let prompt = load_prompt(&codec, &a)?;
    let utterances = read_phones_file(&a.phones)?;
    if utterances.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no utterances", a.phones.display())));
    }

    let registry = AdapterRegistry::new(model.config().clone());
    let mut names = Vec::new();
    for path in &a.adapters {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        let info = registry.load(LoraAdapter::from_bytes(&bytes)?)?;
        names.push(info.name);
    }
    let stack = registry.resolve(&names)?;

    let params = DecodeParams {
        mode: match a.decode.mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::Sampled => DecodeMode::Sampled,
        },
        temperature: a.decode.temperature,
        top_k: a.decode.top_k,
        rng_seed: a.decode.seed,
        max_new_tokens: a.decode.max_new_tokens.unwrap_or(config.server.max_new_tokens),
    };
    let conditions = codec.prompt_embed(&prompt, &model)?;
    let vocab = model.config().vocab;
    let mut cache = PagedKvCache::new(config.page_config()?)?;
    let mut logged = Vec::new();
    let mut all_terminated = true;
    for (i, phones) in utterances.iter().enumerate() {
        let prefix = compose_inference_prefix(model.config().condition_len, &PhonemeSeq::from_indices(&vocab, phones)?)?;
        cache.allocate_sequence(i as u64)?;
        let out = decode(&model, &stack, &prefix, &conditions, &params, &mut cache, i as u64)?;
        cache.free_sequence(i as u64)?;
        all_terminated &= out.terminated;
        logged.extend(out.codec.indices(&vocab));
    }
    let pcm = codec.render(&logged)?;
    toycodec::write_wav(
        &a.out,
        &PromptAudio {
            samples: pcm,
            sample_rate: codec.spec().sample_rate,
        },
    )?;

    // read back what was written and invert it
    let recovered = codec.analyze(&toycodec::read_wav(&a.out)?.samples)?;
    let per = if logged.is_empty() {
        if recovered.is_empty() { Some(0.0) } else { None }
    } else {
        Some(evalkit::per(&logged, &recovered)?.rate)
    };
    let ok = recovered == logged;
    println!(
        "utterances={} tokens={} terminated={} per_self={} roundtrip={} out={}",
        utterances.len(),
        logged.len(),
        all_terminated,
        per.map_or("n/a".into(), |p| format!("{p:.4}")),
        if ok { "ok" } else { "MISMATCH" },
        a.out.display()
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run_bench(config: &Config, a: BenchArgs) -> Result<ExitCode> {
    let (lo, hi) = a.phones.map_or((a.phones_min, a.phones_max), |n| (n, n));
    let opts = BenchOptions {
        concurrency: a.concurrency,
        requests: a.requests,
        phones_min: lo,
        phones_max: hi,
        max_new_tokens: a.max_new_tokens,
        latency_budget_ms: a.latency_budget,
        seed: a.seed,
        adapters: a.adapters,
    };
    let report = match &a.addr {
        Some(addr) => {
            let addr = std::net::ToSocketAddrs::to_socket_addrs(addr.as_str())?
                .next()
                .ok_or_else(|| Error::InvalidArgument(format!("cannot resolve {addr}")))?;
            bench::run(addr, &opts, config.vocab.phoneme_count)?
        }
        None => bench::run_in_process(config, &opts)?,
    };
    if let Some(h) = &report.server_histogram {
        println!("server histogram edges_ms={:?} counts={:?} total={}", h.edges_ms, h.counts, h.total);
    }
    println!("{}", report.summary_line());
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::file(p, e))?;
    }
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn emit(out: Option<&Path>, value: &serde_json::Value, summary: &str) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, serde_json::to_vec_pretty(value)?).map_err(|e| Error::file(p, e))?;
            print!("{summary}");
        }
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn eval(cmd: EvalCommand) -> Result<ExitCode> {
    match cmd {
        EvalCommand::Per { input, out } => {
            let records: Vec<UtteranceRecord> = evalkit::read_jsonl(&input)?;
            let reports = evalkit::per_reports(&records)?;
            let pooled = evalkit::PerReport::pooled(&reports.iter().map(|r| r.1).collect::<Vec<_>>());
            let summary = evalkit::summarize(&input.display().to_string(), &records, &BadCaseConfig::default());
            let value = serde_json::json!({
                "pooled": pooled,
                "utterances": reports.iter().map(|(id, r)| serde_json::json!({"id": id, "report": r})).collect::<Vec<_>>(),
                "summary": summary,
            });
            emit(out.as_deref(), &value, &evalkit::render_summary_table(&[summary]))?;
        }
        EvalCommand::Bcr { input, frames_per_phone, out } => {
            let records: Vec<UtteranceRecord> = evalkit::read_jsonl(&input)?;
            let cfg = BadCaseConfig {
                frames_per_phone,
                ..Default::default()
            };
            let report = evalkit::bad_case_report(&records, &cfg)?;
            let rate = evalkit::bad_rate(&report)?;
            let bcr = evalkit::bcr(&report).ok();
            let summary = evalkit::summarize(&input.display().to_string(), &records, &cfg);
            let value = serde_json::json!({
                "utterances": report.len(),
                "bad_cases": report.bad_count(),
                "bad_rate": rate,
                "bcr": bcr,
                "flags": report.utterances,
            });
            let text = format!(
                "{}bad_cases={} utterances={} bad_rate={rate:.4} bcr={}\n",
                evalkit::render_summary_table(&[summary]),
                report.bad_count(),
                report.len(),
                bcr.map_or("n/a (needs exactly 100 utterances)".into(), |b| format!("{b:.2}")),
            );
            emit(out.as_deref(), &value, &text)?;
        }
        EvalCommand::Pairs { samples, source, ranks, out } => {
            let mut rows: Vec<RatedSample> = evalkit::read_jsonl(&samples)?;
            if let Some(r) = &ranks {
                evalkit::apply_ranks(&mut rows, &evalkit::read_ranks_csv(r)?)?;
            }
            let source = match source {
                SourceArg::Objective => RatingSource::Objective,
                SourceArg::Subjective => RatingSource::Subjective,
            };
            let pairs = evalkit::build_preference_pairs(&rows, source)?;
            match out {
                Some(p) => {
                    evalkit::write_jsonl(&p, &pairs)?;
                    let label = serde_json::to_value(source)?;
                    println!("pairs={} source={} out={}", pairs.len(), label.as_str().unwrap_or_default(), p.display());
                }
                None => {
                    for p in &pairs {
                        println!("{}", serde_json::to_string(p)?);
                    }
                }
            }
        }
        EvalCommand::Overlap { samples, ranks, pairs_a, pairs_b, out } => {
            let (a, b): (Vec<PreferencePair>, Vec<PreferencePair>) = match (samples, ranks, pairs_a, pairs_b) {
                (Some(s), Some(r), None, None) => {
                    let mut rows: Vec<RatedSample> = evalkit::read_jsonl(&s)?;
                    evalkit::apply_ranks(&mut rows, &evalkit::read_ranks_csv(&r)?)?;
                    (
                        evalkit::build_preference_pairs(&rows, RatingSource::Objective)?,
                        evalkit::build_preference_pairs(&rows, RatingSource::Subjective)?,
                    )
                }
                (None, _, Some(pa), Some(pb)) => (evalkit::read_jsonl(&pa)?, evalkit::read_jsonl(&pb)?),
                _ => {
                    return Err(Error::InvalidArgument(
                        "overlap needs --samples with --ranks, or --pairs-a with --pairs-b".into(),
                    ))
                }
            };
            let value = evalkit::overlap(&a, &b)?;
            let json = serde_json::json!({"overlap": value, "pairs_a": a.len(), "pairs_b": b.len()});
            emit(out.as_deref(), &json, &format!("overlap={value:.2} pairs_a={} pairs_b={}\n", a.len(), b.len()))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn adapter(config: &Config, cmd: AdapterCommand) -> Result<ExitCode> {
    let model_cfg = config.model_config()?;
    match cmd {
        AdapterCommand::Pack { name, kind, rank, alpha, seed, out } => {
            let adapter = LoraAdapter::random(&model_cfg, name, kind, rank, alpha, seed);
            std::fs::write(&out, adapter.to_bytes()).map_err(|e| Error::file(&out, e))?;
            println!("wrote {} ({kind}, rank {rank}, alpha {alpha})", out.display());
        }
        AdapterCommand::Inspect { path } => {
            let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
            let adapter = LoraAdapter::from_bytes(&bytes)?;
            let compatible = adapter.check_compatible(&model_cfg);
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "name": adapter.name,
                    "kind": adapter.kind,
                    "rank": adapter.rank,
                    "alpha": adapter.alpha,
                    "layers": adapter.layers.len(),
                    "bytes": bytes.len(),
                    "compatible": compatible.as_ref().map_or_else(|e| e.to_string(), |_| "yes".into()),
                }))?
            );
            compatible?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
