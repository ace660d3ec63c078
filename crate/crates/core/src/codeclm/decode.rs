use serde::{Deserialize, Serialize};

use super::model::{AdapterStack, Input, Model};
use super::tensor::log_softmax;
use crate::error::{Error, Result};
use crate::kvcache::{KvStore, SeqId};
use crate::rng::SplitMix64;
use crate::tokenspace::{prediction_mask, CodecSeq, ComposedSequence, E, S};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub temperature: f32,
    pub top_k: usize,
    pub rng_seed: u64,
    pub max_new_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_k: 50,
            rng_seed: 0,
            max_new_tokens: 256,
        }
    }
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.mode == DecodeMode::Sampled {
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return Err(Error::invalid(format!(
                    "temperature must be > 0 (got {})",
                    self.temperature
                )));
            }
            if self.top_k == 0 || self.top_k > vocab_size {
                return Err(Error::invalid(format!(
                    "top_k must be in [1, {vocab_size}] (got {})",
                    self.top_k
                )));
            }
        }
        Ok(())
    }
}

fn check_finite(logits: &[f32]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Numeric("empty logits".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at id {i}")));
    }
    Ok(())
}

/// Argmax, ties to the lowest id.
pub fn greedy_step(logits: &[f32]) -> Result<u32> {
    check_finite(logits)?;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Temperature-scaled softmax over the `top_k` largest logits (ties by
/// lower id), sampled by inverse CDF with one uniform draw from `rng`.
pub fn sample_step(logits: &[f32], params: &DecodeParams, rng: &mut SplitMix64) -> Result<u32> {
    check_finite(logits)?;
    params.validate(logits.len())?;
    let probs = top_k_probs(logits, params.temperature, params.top_k);
    let u = rng.next_f64();
    let mut acc = 0.0;
    for &(id, p) in &probs {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(probs.last().expect("top_k >= 1").0)
}

/// The sampling distribution `sample_step` draws from, in draw order.
pub fn top_k_probs(logits: &[f32], temperature: f32, top_k: usize) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    order.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(top_k);
    let t = temperature as f64;
    let max = logits[order[0] as usize] as f64 / t;
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| (logits[i as usize] as f64 / t - max).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    order.into_iter().zip(weights.into_iter().map(|w| w / z)).collect()
}

/// Per-request token selector. Holds the sampling generator so a request's
/// draws do not depend on what else is being decoded.
#[derive(Debug, Clone)]
pub struct TokenSelector {
    params: DecodeParams,
    rng: SplitMix64,
}

impl TokenSelector {
    pub fn new(params: DecodeParams) -> Self {
        let rng = SplitMix64::new(params.rng_seed);
        Self { params, rng }
    }

    pub fn params(&self) -> &DecodeParams {
        &self.params
    }

    pub fn select(&mut self, logits: &[f32]) -> Result<u32> {
        match self.params.mode {
            DecodeMode::Greedy => greedy_step(logits),
            DecodeMode::Sampled => sample_step(logits, &self.params, &mut self.rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Codec tokens in emission order, `E` and stray ids excluded.
    pub codec: CodecSeq,
    pub terminated: bool,
    /// Every id the model emitted, including stray non-codec ids and `E`.
    pub generated: Vec<u32>,
}

impl DecodeOutput {
    pub fn from_generated(model: &Model, generated: Vec<u32>, terminated: bool) -> Self {
        let vocab = model.config().vocab;
        let codec = generated
            .iter()
            .copied()
            .filter(|&t| vocab.is_codec(t))
            .collect();
        Self {
            codec: CodecSeq::new(&vocab, codec).expect("filtered to codec range"),
            terminated,
            generated,
        }
    }

    /// Ids generated that are neither codec tokens nor `E`.
    pub fn stray_count(&self) -> usize {
        self.generated.len() - self.codec.len() - usize::from(self.terminated)
    }
}

/// Autoregressive decode of one request against an already-allocated cache
/// sequence. Errors from the cache (notably out-of-pages) propagate for the
/// caller to act on.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    model: &Model,
    adapters: &AdapterStack,
    prefix: &ComposedSequence,
    conditions: &[Vec<f32>],
    params: &DecodeParams,
    cache: &mut dyn KvStore,
    seq: SeqId,
) -> Result<DecodeOutput> {
    if prefix.is_complete() || prefix.token_ids().last() != Some(&S) {
        return Err(Error::invalid("decode prefix must end at S"));
    }
    if conditions.len() != prefix.condition_len() {
        return Err(Error::invalid(format!(
            "{} condition embeddings for condition_len {}",
            conditions.len(),
            prefix.condition_len()
        )));
    }
    params.validate(model.vocab_size())?;
    let mut generated = Vec::new();
    if params.max_new_tokens == 0 {
        return Ok(DecodeOutput::from_generated(model, generated, false));
    }
    let mut selector = TokenSelector::new(params.clone());
    let inputs = Model::prefix_inputs(conditions, prefix.token_ids());
    let mut logits = model.forward(adapters, &inputs, cache, seq)?;
    loop {
        let tok = selector.select(&logits)?;
        generated.push(tok);
        if tok == E {
            return Ok(DecodeOutput::from_generated(model, generated, true));
        }
        if generated.len() >= params.max_new_tokens {
            return Ok(DecodeOutput::from_generated(model, generated, false));
        }
        logits = model.forward(adapters, &[Input::Token(tok)], cache, seq)?;
    }
}

/// Mean log-probability of the predicted positions (codec tokens and `E`)
/// of a full training-layout sequence.
pub fn sequence_logprob(
    model: &Model,
    seq: &ComposedSequence,
    conditions: &[Vec<f32>],
) -> Result<f64> {
    let mask = prediction_mask(seq)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("sequence has no predicted positions"));
    }
    if conditions.len() != seq.condition_len() {
        return Err(Error::invalid("condition embedding count mismatch"));
    }
    let cfg = model.config();
    let mut cache = crate::kvcache::ContiguousKvCache::new(cfg.kv_payload_len());
    cache.allocate_sequence(0)?;
    let tokens = seq.token_ids();
    // the last token is never an input for prediction
    let inputs = Model::prefix_inputs(conditions, &tokens[..tokens.len() - 1]);
    let all = model.forward_all(&[], &inputs, &mut cache, 0)?;
    let c = seq.condition_len();
    let (mut total, mut n) = (0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            // token i is predicted by the logits at model position c + i - 1
            let lp = log_softmax(&all[c + i - 1]);
            total += lp[tokens[i] as usize];
            n += 1;
        }
    }
    Ok(total / n as f64)
}
