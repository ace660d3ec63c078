//! Deterministic codec-token text-to-speech engine.
//!
//! A small decoder-only transformer predicts codec tokens after a phoneme
//! prefix and prompt-derived condition slots. Around it sit a paged KV
//! cache, a continuous-batching scheduler with per-request LoRA stacks, an
//! exactly invertible toy codec, a streaming TCP server and evaluation
//! tooling.

pub mod bench;
pub mod codeclm;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod kvcache;
pub mod rng;
pub mod scheduler;
pub mod server;
pub mod tokenspace;
pub mod toycodec;

pub use error::{Error, Result};
