//! C ABI over the codecserve engine.
//!
//! Conventions:
//! - every fallible call returns a [`CsStatus`]; on failure a message is
//!   kept per thread and read back with [`cs_last_error_message`];
//! - handles are opaque and owned by the caller once created, and must be
//!   released with the matching `*_free`;
//! - output buffers are caller-allocated. When one is too small the call
//!   returns `CS_STATUS_BUFFER_TOO_SMALL` and reports the needed length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};

use codecserve::codeclm::{decode, DecodeMode, DecodeParams, LoraAdapter, Model};
use codecserve::config::Config;
use codecserve::evalkit;
use codecserve::kvcache::PagedKvCache;
use codecserve::server::registry::AdapterRegistry;
use codecserve::tokenspace::{compose_inference_prefix, PhonemeSeq};
use codecserve::toycodec::{self, Codec, CodecSpec, PromptAudio};
use codecserve::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    UnknownAdapter = 4,
    BadContainer = 5,
    OutOfPages = 6,
    ResourceExhausted = 7,
    BadConfig = 8,
    Io = 9,
    Numeric = 10,
    Internal = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsDecodeMode {
    Greedy = 0,
    Sampled = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CsDecodeParams {
    pub mode: CsDecodeMode,
    pub temperature: f32,
    pub top_k: usize,
    pub rng_seed: u64,
    pub max_new_tokens: usize,
}

/// Model, adapter registry and KV cache built from one config.
pub struct CsEngine {
    config: Config,
    model: Model,
    codec: Codec,
    registry: AdapterRegistry,
    cache: Mutex<PagedKvCache>,
}

/// Toy codec for token/PCM conversion.
pub struct CsCodec {
    codec: Codec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CsStatus {
    match e {
        Error::UnknownAdapter(_) => CsStatus::UnknownAdapter,
        Error::BadContainer(_) => CsStatus::BadContainer,
        Error::OutOfPages { .. } => CsStatus::OutOfPages,
        Error::ResourceExhausted(_) | Error::QueueFull(_) => CsStatus::ResourceExhausted,
        Error::Config { .. } => CsStatus::BadConfig,
        Error::Io(_) | Error::File { .. } | Error::Wav(_) => CsStatus::Io,
        Error::Numeric(_) => CsStatus::Numeric,
        _ => CsStatus::InvalidArgument,
    }
}

fn fail(status: CsStatus, msg: impl AsRef<str>) -> CsStatus {
    set_error(msg.as_ref());
    status
}

/// Run `f`, mapping library errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<CsStatus, Error>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            if s == CsStatus::Ok {
                set_error("");
            }
            s
        }
        Ok(Err(e)) => fail(status_of(&e), e.to_string()),
        Err(_) => fail(CsStatus::Internal, "internal panic"),
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Stable name of a status, e.g. `"unknown-adapter"`.
#[no_mangle]
pub extern "C" fn cs_status_name(status: CsStatus) -> *const c_char {
    let s: &'static str = match status {
        CsStatus::Ok => "ok\0",
        CsStatus::NullPointer => "null-pointer\0",
        CsStatus::InvalidArgument => "invalid-argument\0",
        CsStatus::BufferTooSmall => "buffer-too-small\0",
        CsStatus::UnknownAdapter => "unknown-adapter\0",
        CsStatus::BadContainer => "bad-container\0",
        CsStatus::OutOfPages => "out-of-pages\0",
        CsStatus::ResourceExhausted => "resource-exhausted\0",
        CsStatus::BadConfig => "bad-config\0",
        CsStatus::Io => "io-error\0",
        CsStatus::Numeric => "numeric-error\0",
        CsStatus::Internal => "internal\0",
    };
    s.as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

#[no_mangle]
pub extern "C" fn cs_decode_params_default() -> CsDecodeParams {
    let d = DecodeParams::default();
    CsDecodeParams {
        mode: CsDecodeMode::Greedy,
        temperature: d.temperature,
        top_k: d.top_k,
        rng_seed: d.rng_seed,
        max_new_tokens: d.max_new_tokens,
    }
}

/// Build an engine from a JSON config; NULL or `""` selects the defaults.
///
/// # Safety
/// `config_json` must be NULL or a valid NUL-terminated string; `out` must
/// point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_new(config_json: *const c_char, out: *mut *mut CsEngine) -> CsStatus {
    if out.is_null() {
        return fail(CsStatus::NullPointer, "out is NULL");
    }
    *out = std::ptr::null_mut();
    guard(|| {
        let config = if config_json.is_null() {
            Config::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Error::InvalidArgument("config is not UTF-8".into()))?;
            if text.trim().is_empty() {
                Config::default()
            } else {
                Config::from_json(text)?
            }
        };
        let model = config.build_model()?;
        let engine = CsEngine {
            codec: config.build_codec()?,
            registry: AdapterRegistry::new(model.config().clone()),
            cache: Mutex::new(PagedKvCache::new(config.page_config()?)?),
            model,
            config,
        };
        *out = Box::into_raw(Box::new(engine));
        Ok(CsStatus::Ok)
    })
}

/// # Safety
/// `engine` must be NULL or a handle from [`cs_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_free(engine: *mut CsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Hex SHA-256 of the engine's resolved config (64 chars plus NUL).
///
/// # Safety
/// `engine` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_config_checksum(engine: *const CsEngine, buf: *mut c_char, cap: usize) -> CsStatus {
    let Some(engine) = engine.as_ref() else {
        return fail(CsStatus::NullPointer, "engine is NULL");
    };
    if buf.is_null() {
        return fail(CsStatus::NullPointer, "buf is NULL");
    }
    let sum = engine.config.checksum();
    if cap < sum.len() + 1 {
        return fail(CsStatus::BufferTooSmall, format!("need {} bytes", sum.len() + 1));
    }
    std::ptr::copy_nonoverlapping(sum.as_ptr().cast(), buf, sum.len());
    *buf.add(sum.len()) = 0;
    CsStatus::Ok
}

/// Register a TKLA adapter blob under its embedded name.
///
/// # Safety
/// `engine` must be a live handle; `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_load_adapter(engine: *const CsEngine, data: *const u8, len: usize) -> CsStatus {
    let Some(engine) = engine.as_ref() else {
        return fail(CsStatus::NullPointer, "engine is NULL");
    };
    let Some(bytes) = slice(data, len) else {
        return fail(CsStatus::NullPointer, "data is NULL");
    };
    guard(|| {
        engine.registry.load(LoraAdapter::from_bytes(bytes)?)?;
        Ok(CsStatus::Ok)
    })
}

/// # Safety
/// `engine` must be a live handle; `name` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_unload_adapter(engine: *const CsEngine, name: *const c_char) -> CsStatus {
    let Some(engine) = engine.as_ref() else {
        return fail(CsStatus::NullPointer, "engine is NULL");
    };
    if name.is_null() {
        return fail(CsStatus::NullPointer, "name is NULL");
    }
    guard(|| {
        engine.registry.unload(&CStr::from_ptr(name).to_string_lossy())?;
        Ok(CsStatus::Ok)
    })
}

/// Synthesize codec tokens for phoneme inventory indices.
///
/// `prompt_pcm` (mono s16 at the codec sample rate) may be NULL to use the
/// built-in neutral prompt. `adapter_names` lists registered adapters, at
/// most one per kind. `params` may be NULL for greedy defaults. Codec token
/// indices are written to `out_tokens`; `out_len` receives their count (or
/// the needed capacity on `CS_STATUS_BUFFER_TOO_SMALL`).
///
/// # Safety
/// Every non-NULL pointer must be valid for the stated length; `out_len`
/// and `out_terminated` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cs_engine_synthesize(
    engine: *const CsEngine,
    phones: *const u32,
    n_phones: usize,
    prompt_pcm: *const i16,
    prompt_len: usize,
    adapter_names: *const *const c_char,
    n_adapters: usize,
    params: *const CsDecodeParams,
    out_tokens: *mut u32,
    cap: usize,
    out_len: *mut usize,
    out_terminated: *mut bool,
) -> CsStatus {
    let Some(engine) = engine.as_ref() else {
        return fail(CsStatus::NullPointer, "engine is NULL");
    };
    if out_len.is_null() || out_terminated.is_null() {
        return fail(CsStatus::NullPointer, "out_len and out_terminated are required");
    }
    let Some(phones) = slice(phones, n_phones) else {
        return fail(CsStatus::NullPointer, "phones is NULL");
    };
    let Some(names) = slice(adapter_names, n_adapters) else {
        return fail(CsStatus::NullPointer, "adapter_names is NULL");
    };
    if names.iter().any(|p| p.is_null()) {
        return fail(CsStatus::NullPointer, "adapter name is NULL");
    }
    let prompt = if prompt_pcm.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(prompt_pcm, prompt_len))
    };
    let params = params.as_ref().copied().unwrap_or_else(|| cs_decode_params_default());
    guard(|| {
        let names: Vec<String> = names
            .iter()
            .map(|&p| CStr::from_ptr(p).to_string_lossy().into_owned())
            .collect();
        let stack: Vec<Arc<LoraAdapter>> = engine.registry.resolve(&names)?;
        let audio = match prompt {
            Some(samples) => PromptAudio {
                samples: samples.to_vec(),
                sample_rate: engine.codec.spec().sample_rate,
            },
            None => toycodec::preset_prompt(&engine.codec, "neutral")?,
        };
        let cfg = engine.model.config();
        let conditions = engine.codec.prompt_embed(&audio, &engine.model)?;
        let prefix = compose_inference_prefix(cfg.condition_len, &PhonemeSeq::from_indices(&cfg.vocab, phones)?)?;
        let decode_params = DecodeParams {
            mode: match params.mode {
                CsDecodeMode::Greedy => DecodeMode::Greedy,
                CsDecodeMode::Sampled => DecodeMode::Sampled,
            },
            temperature: params.temperature,
            top_k: params.top_k,
            rng_seed: params.rng_seed,
            max_new_tokens: params.max_new_tokens,
        };
        let output = {
            let mut cache = engine.cache.lock().unwrap_or_else(|p| p.into_inner());
            cache.allocate_sequence(0)?;
            let r = decode(&engine.model, &stack, &prefix, &conditions, &decode_params, &mut *cache, 0);
            cache.free_sequence(0)?;
            r?
        };
        let tokens = output.codec.indices(&cfg.vocab);
        *out_len = tokens.len();
        *out_terminated = output.terminated;
        if tokens.len() > cap {
            return Ok(fail(CsStatus::BufferTooSmall, format!("need room for {} tokens", tokens.len())));
        }
        if !tokens.is_empty() {
            if out_tokens.is_null() {
                return Ok(fail(CsStatus::NullPointer, "out_tokens is NULL"));
            }
            std::ptr::copy_nonoverlapping(tokens.as_ptr(), out_tokens, tokens.len());
        }
        Ok(CsStatus::Ok)
    })
}

/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cs_codec_new(sample_rate: u32, frame_len: usize, codec_count: u32, out: *mut *mut CsCodec) -> CsStatus {
    if out.is_null() {
        return fail(CsStatus::NullPointer, "out is NULL");
    }
    *out = std::ptr::null_mut();
    guard(|| {
        let codec = Codec::new(CodecSpec {
            sample_rate,
            frame_len,
            codec_count,
            ..CodecSpec::default()
        })?;
        *out = Box::into_raw(Box::new(CsCodec { codec }));
        Ok(CsStatus::Ok)
    })
}

/// # Safety
/// `codec` must be NULL or a handle from [`cs_codec_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cs_codec_free(codec: *mut CsCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Samples per frame, or 0 for a NULL handle.
///
/// # Safety
/// `codec` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_codec_frame_len(codec: *const CsCodec) -> usize {
    codec.as_ref().map_or(0, |c| c.codec.spec().frame_len)
}

/// # Safety
/// `codec` must be a live handle; `out_pcm` must point to `cap` writable
/// samples.
#[no_mangle]
pub unsafe extern "C" fn cs_codec_token_to_frame(codec: *const CsCodec, token: u32, out_pcm: *mut i16, cap: usize) -> CsStatus {
    let Some(codec) = codec.as_ref() else {
        return fail(CsStatus::NullPointer, "codec is NULL");
    };
    if out_pcm.is_null() {
        return fail(CsStatus::NullPointer, "out_pcm is NULL");
    }
    guard(|| {
        let frame = codec.codec.token_to_frame(token)?;
        if cap < frame.len() {
            return Ok(fail(CsStatus::BufferTooSmall, format!("need {} samples", frame.len())));
        }
        std::ptr::copy_nonoverlapping(frame.as_ptr(), out_pcm, frame.len());
        Ok(CsStatus::Ok)
    })
}

/// # Safety
/// `codec` must be a live handle; `pcm` must point to `len` samples and
/// `out_token` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cs_codec_frame_to_token(codec: *const CsCodec, pcm: *const i16, len: usize, out_token: *mut u32) -> CsStatus {
    let Some(codec) = codec.as_ref() else {
        return fail(CsStatus::NullPointer, "codec is NULL");
    };
    let Some(frame) = slice(pcm, len) else {
        return fail(CsStatus::NullPointer, "pcm is NULL");
    };
    if out_token.is_null() {
        return fail(CsStatus::NullPointer, "out_token is NULL");
    }
    guard(|| {
        *out_token = codec.codec.frame_to_token(frame)?;
        Ok(CsStatus::Ok)
    })
}

/// Edit-distance rate of `hypothesis` against a non-empty `reference`.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out_rate` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cs_per(
    reference: *const u32,
    n_reference: usize,
    hypothesis: *const u32,
    n_hypothesis: usize,
    out_rate: *mut f64,
) -> CsStatus {
    let (Some(r), Some(h)) = (slice(reference, n_reference), slice(hypothesis, n_hypothesis)) else {
        return fail(CsStatus::NullPointer, "sequence pointer is NULL");
    };
    if out_rate.is_null() {
        return fail(CsStatus::NullPointer, "out_rate is NULL");
    }
    guard(|| {
        *out_rate = evalkit::per(r, h)?.rate;
        Ok(CsStatus::Ok)
    })
}
