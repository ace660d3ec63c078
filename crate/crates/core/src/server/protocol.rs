//! Control-JSON message schemas carried in `0x01`, `0x04` and `0x7F` frames.

use serde::{Deserialize, Serialize};

use crate::codeclm::DecodeParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlMessage {
    Synthesize(SynthesizeRequest),
    LoadAdapter(LoadAdapter),
    UnloadAdapter { name: String },
    ListAdapters,
    Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizeRequest {
    /// Phoneme inventory indices.
    pub phones: Vec<u32>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub adapters: Vec<String>,
    #[serde(default)]
    pub decode: Option<DecodeParams>,
    #[serde(default = "yes")]
    pub stream: bool,
    #[serde(default)]
    pub chunk_tokens: Option<usize>,
    /// Also send a `0x03` token frame ahead of each audio frame.
    #[serde(default)]
    pub return_tokens: bool,
}

fn yes() -> bool {
    true
}

impl SynthesizeRequest {
    pub fn new(phones: Vec<u32>) -> Self {
        Self {
            phones,
            prompt: PromptSpec::default(),
            adapters: Vec::new(),
            decode: None,
            stream: true,
            chunk_tokens: None,
            return_tokens: false,
        }
    }
}

/// A named preset (`"neutral"`, `"silence"`, ...) or an inline WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptSpec {
    Preset(String),
    Wav { wav_base64: String },
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec::Preset("neutral".into())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadAdapter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob_base64: Option<String>,
}

/// Payload of the `0x04` frame closing a synthesis stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneStats {
    pub request_id: u64,
    /// Codec tokens rendered to audio.
    pub tokens: usize,
    /// Every id generated, including `E` and stray non-codec ids.
    pub generated: usize,
    pub terminated: bool,
    pub preemptions: u32,
    pub audio_frames: usize,
    pub first_token_ms: Option<f64>,
    pub first_packet_ms: Option<f64>,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterAck {
    pub ok: bool,
    pub name: String,
    pub kind: crate::codeclm::AdapterKind,
    pub rank: usize,
    pub alpha: f32,
    pub epoch: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_synthesize() {
        let m: ControlMessage =
            serde_json::from_str(r#"{"op":"synthesize","phones":[1,2,3]}"#).unwrap();
        let ControlMessage::Synthesize(s) = m else {
            panic!()
        };
        assert_eq!(s.phones, vec![1, 2, 3]);
        assert!(s.stream);
        assert_eq!(s.prompt, PromptSpec::Preset("neutral".into()));
    }

    #[test]
    fn parse_full_synthesize() {
        let m: ControlMessage = serde_json::from_str(
            r#"{"op":"synthesize","phones":[4],"prompt":{"wav_base64":"AAAA"},
               "adapters":["news"],"decode":{"mode":"sampled","top_k":5,"rng_seed":3},
               "stream":false,"chunk_tokens":4}"#,
        )
        .unwrap();
        let ControlMessage::Synthesize(s) = m else {
            panic!()
        };
        assert!(!s.stream);
        assert_eq!(s.chunk_tokens, Some(4));
        let d = s.decode.unwrap();
        assert_eq!(d.top_k, 5);
        assert_eq!(d.max_new_tokens, DecodeParams::default().max_new_tokens);
    }

    #[test]
    fn other_ops() {
        for (text, want) in [
            (r#"{"op":"metrics"}"#, ControlMessage::Metrics),
            (r#"{"op":"list_adapters"}"#, ControlMessage::ListAdapters),
            (
                r#"{"op":"unload_adapter","name":"x"}"#,
                ControlMessage::UnloadAdapter { name: "x".into() },
            ),
        ] {
            assert_eq!(serde_json::from_str::<ControlMessage>(text).unwrap(), want);
        }
        assert!(serde_json::from_str::<ControlMessage>(r#"{"op":"nope"}"#).is_err());
    }
}
