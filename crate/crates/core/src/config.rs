//! JSON configuration shared by every command.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codeclm::{init_params, LoraAdapter, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::kvcache::PageConfig;
use crate::scheduler::SchedulerConfig;
use crate::server::registry::AdapterRegistry;
use crate::server::ServerSettings;
use crate::tokenspace::{VocabLayout, DEFAULT_CONDITION_LEN};
use crate::toycodec::{Codec, CodecSpec};

pub const CONFIG_ENV: &str = "TAKIN_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seed: u64,
    pub condition_len: usize,
    pub max_positions: usize,
    /// Serve int8 weights instead of f32.
    pub quantize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            layers: m.n_layers,
            heads: m.n_heads,
            ffn: m.ffn_dim,
            seed: m.seed,
            condition_len: DEFAULT_CONDITION_LEN,
            max_positions: m.max_positions,
            quantize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub phoneme_count: u32,
    pub codec_count: u32,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            phoneme_count: 128,
            codec_count: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub sample_rate: u32,
    pub frame_len: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecSpec::default();
        Self {
            sample_rate: c.sample_rate,
            frame_len: c.frame_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub pages: usize,
    pub page_size: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            pages: 256,
            page_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    pub port: u16,
    pub max_frame: usize,
    pub chunk_tokens: usize,
    pub max_new_tokens: usize,
    /// TKLA files loaded at startup.
    pub adapters: Vec<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        let s = ServerSettings::default();
        Self {
            bind: s.bind,
            port: s.port,
            max_frame: s.max_frame,
            chunk_tokens: s.chunk_tokens,
            max_new_tokens: s.default_max_new_tokens,
            adapters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub vocab: VocabSection,
    pub codec: CodecSection,
    pub cache: CacheSection,
    pub scheduler: SchedulerConfig,
    pub server: ServerSection,
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| bad("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// `path` if given, else `$TAKIN_CONFIG` if set, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = VocabLayout::new(self.vocab.phoneme_count, self.vocab.codec_count)
            .map_err(|e| bad("vocab", e.to_string()))?;
        self.model_config_unchecked(vocab).validate()?;
        self.codec_spec().validate()?;
        if self.cache.page_size == 0 {
            return Err(bad("cache.page_size", "must be >= 1"));
        }
        if self.cache.pages == 0 {
            return Err(bad("cache.pages", "must be >= 1"));
        }
        let longest = self.model.condition_len + 4 + self.server.max_new_tokens;
        if longest > self.model.max_positions {
            return Err(bad(
                "model.max_positions",
                format!(
                    "model.max_positions ({}) is below model.condition_len + 4 + server.max_new_tokens ({longest})",
                    self.model.max_positions
                ),
            ));
        }
        if self.cache.pages * self.cache.page_size < self.model.max_positions {
            return Err(bad(
                "cache.pages",
                format!(
                    "cache.pages * cache.page_size ({}) cannot hold one sequence of model.max_positions ({})",
                    self.cache.pages * self.cache.page_size,
                    self.model.max_positions
                ),
            ));
        }
        if self.scheduler.max_batch == 0 {
            return Err(bad("scheduler.max_batch", "must be >= 1"));
        }
        if self.scheduler.queue_capacity == 0 {
            return Err(bad("scheduler.queue_capacity", "must be >= 1"));
        }
        if self.server.chunk_tokens == 0 {
            return Err(bad("server.chunk_tokens", "must be >= 1"));
        }
        let chunk_bytes = self.server.chunk_tokens * self.codec.frame_len * 2;
        if chunk_bytes > self.server.max_frame {
            return Err(bad(
                "server.max_frame",
                format!(
                    "server.max_frame ({}) is smaller than one audio chunk of server.chunk_tokens ({}) frames ({chunk_bytes} bytes)",
                    self.server.max_frame, self.server.chunk_tokens
                ),
            ));
        }
        if self.server.max_new_tokens == 0 {
            return Err(bad("server.max_new_tokens", "must be >= 1"));
        }
        Ok(())
    }

    fn model_config_unchecked(&self, vocab: VocabLayout) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.layers,
            n_heads: self.model.heads,
            ffn_dim: self.model.ffn,
            max_positions: self.model.max_positions,
            vocab,
            condition_len: self.model.condition_len,
            prompt_dim: self.codec.frame_len / 2 + 1,
            seed: self.model.seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = VocabLayout::new(self.vocab.phoneme_count, self.vocab.codec_count)?;
        Ok(self.model_config_unchecked(vocab))
    }

    pub fn codec_spec(&self) -> CodecSpec {
        CodecSpec {
            sample_rate: self.codec.sample_rate,
            frame_len: self.codec.frame_len,
            codec_count: self.vocab.codec_count,
            ..CodecSpec::default()
        }
    }

    pub fn page_config(&self) -> Result<PageConfig> {
        Ok(PageConfig {
            page_size: self.cache.page_size,
            num_pages: self.cache.pages,
            payload_len: self.model_config()?.kv_payload_len(),
        })
    }

    pub fn server_settings(&self) -> ServerSettings {
        ServerSettings {
            bind: self.server.bind.clone(),
            port: self.server.port,
            max_frame: self.server.max_frame,
            chunk_tokens: self.server.chunk_tokens,
            default_max_new_tokens: self.server.max_new_tokens,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let params = init_params(&self.model_config()?)?;
        if self.model.quantize {
            Model::quantized(&params)
        } else {
            Ok(Model::new(&params))
        }
    }

    pub fn build_codec(&self) -> Result<Codec> {
        Codec::new(self.codec_spec())
    }

    /// A registry holding every adapter named under `server.adapters`.
    pub fn build_registry(&self) -> Result<Arc<AdapterRegistry>> {
        let registry = AdapterRegistry::new(self.model_config()?);
        for path in &self.server.adapters {
            let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
            registry.load(LoraAdapter::from_bytes(&bytes)?)?;
        }
        Ok(Arc::new(registry))
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn checksum(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.server.port, 7070);
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.codec_spec(), CodecSpec::default());
    }

    #[test]
    fn codec_count_vs_frame_len_names_both() {
        let err = Config::from_json(r#"{"vocab":{"codec_count":2000}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("vocab.codec_count") && msg.contains("codec.frame_len"), "{msg}");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(Config::from_json(r#"{"model":{"dmodel":3}}"#).is_err());
    }

    #[test]
    fn max_positions_checked() {
        let err = Config::from_json(r#"{"model":{"max_positions":100}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "model.max_positions"));
    }

    #[test]
    fn checksum_stable_across_equivalent_inputs() {
        let a = Config::from_json("{}").unwrap();
        let b = Config::from_json(r#"{"server":{"port":7070}}"#).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.checksum().len(), 64);
        let c = Config::from_json(r#"{"server":{"port":7071}}"#).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }
}
