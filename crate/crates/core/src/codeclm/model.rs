//! Decoder-only transformer over the unified vocabulary.
//!
//! Pre-norm residual blocks, GELU feed-forward, learned absolute positions,
//! output projection tied to the token embeddings. Positions are processed
//! one at a time through the same code path whether they arrive as a
//! prefill or as single decode steps, so cached history, batching and
//! recompute-after-preemption cannot change the arithmetic.

use std::sync::Arc;

use super::lora::{LoraAdapter, Target};
use super::params::{ModelConfig, Parameters};
use super::quant::QuantMatrix;
use super::tensor::{dot, gelu, Matrix, Norm};
use crate::error::{Error, Result};
use crate::kvcache::{KvStore, SeqId};

#[derive(Debug, Clone)]
pub enum Linear {
    Dense(Matrix),
    Quant(QuantMatrix),
}

impl Linear {
    pub fn rows(&self) -> usize {
        match self {
            Linear::Dense(m) => m.rows,
            Linear::Quant(q) => q.rows,
        }
    }

    pub fn matvec(&self, x: &[f32], out: &mut [f32]) {
        match self {
            Linear::Dense(m) => m.matvec(x, out),
            Linear::Quant(q) => q.matvec(x, out),
        }
    }

    pub fn as_dense(&self) -> Option<&Matrix> {
        match self {
            Linear::Dense(m) => Some(m),
            Linear::Quant(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    // indexed by Target
    attn: [Linear; 4],
    ffn1: Linear,
    ffn2: Linear,
    ln1: Norm,
    ln2: Norm,
}

/// One input position: a continuous condition slot or a token id.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Condition(&'a [f32]),
    Token(u32),
}

pub type AdapterStack = [Arc<LoraAdapter>];

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    ln_f: Norm,
    lm_head: Linear,
    cond_proj: Matrix,
    logit_bias: Option<Vec<f32>>,
}

impl Model {
    pub fn new(params: &Parameters) -> Self {
        Self::build(params, |m| Ok(Linear::Dense(m.clone()))).expect("dense build is infallible")
    }

    /// Every projection matrix (attention, feed-forward and the tied output
    /// head) replaced by its int8 per-channel quantization.
    pub fn quantized(params: &Parameters) -> Result<Self> {
        Self::build(params, |m| Ok(Linear::Quant(QuantMatrix::quantize(m)?)))
    }

    /// Dense model with `W + Σ (alpha/r)·B·A` folded into each attention
    /// projection. Used as the oracle for the unmerged adapter path.
    pub fn merged(params: &Parameters, adapters: &AdapterStack) -> Result<Self> {
        for a in adapters {
            a.check_compatible(&params.config)?;
        }
        let mut model = Self::new(params);
        for (l, block) in model.blocks.iter_mut().enumerate() {
            for t in Target::ALL {
                let Linear::Dense(w) = &mut block.attn[t as usize] else {
                    unreachable!()
                };
                for a in adapters {
                    if let Some(delta) = a.dense_delta(l, t) {
                        for (w, d) in w.data.iter_mut().zip(&delta.data) {
                            *w += d;
                        }
                    }
                }
            }
        }
        Ok(model)
    }

    fn build(params: &Parameters, mut lin: impl FnMut(&Matrix) -> Result<Linear>) -> Result<Self> {
        let blocks = params
            .layers
            .iter()
            .map(|l| {
                Ok(Block {
                    attn: [lin(&l.wq)?, lin(&l.wk)?, lin(&l.wv)?, lin(&l.wo)?],
                    ffn1: lin(&l.ffn1)?,
                    ffn2: lin(&l.ffn2)?,
                    ln1: l.ln1.clone(),
                    ln2: l.ln2.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: params.config.clone(),
            tok_emb: params.tok_emb.clone(),
            pos_emb: params.pos_emb.clone(),
            blocks,
            ln_f: params.ln_f.clone(),
            lm_head: lin(&params.tok_emb)?,
            cond_proj: params.cond_proj.clone(),
            logit_bias: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab.total_size() as usize
    }

    /// Additive bias on every output logit. A testing and demo hook that
    /// stands in for fine-tuning (e.g. to force early termination).
    pub fn with_logit_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != self.vocab_size() {
            return Err(Error::invalid(format!(
                "logit bias has {} entries, vocab has {}",
                bias.len(),
                self.vocab_size()
            )));
        }
        self.logit_bias = Some(bias);
        Ok(self)
    }

    pub fn logit_bias(&self) -> Option<&[f32]> {
        self.logit_bias.as_deref()
    }

    pub fn attention_weight(&self, layer: usize, target: Target) -> &Linear {
        &self.blocks[layer].attn[target as usize]
    }

    /// Project a pooled prompt feature vector into `condition_len` slot
    /// embeddings of width `d_model`.
    pub fn condition_embeddings(&self, features: &[f32]) -> Result<Vec<Vec<f32>>> {
        if features.len() != self.cond_proj.cols {
            return Err(Error::invalid(format!(
                "prompt features have {} dims, model expects {}",
                features.len(),
                self.cond_proj.cols
            )));
        }
        let mut flat = vec![0.0; self.cond_proj.rows];
        self.cond_proj.matvec(features, &mut flat);
        Ok(flat
            .chunks_exact(self.config.d_model)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Input list for a composed prefix: condition slots then token ids.
    pub fn prefix_inputs<'a>(conditions: &'a [Vec<f32>], tokens: &[u32]) -> Vec<Input<'a>> {
        conditions
            .iter()
            .map(|c| Input::Condition(c))
            .chain(tokens.iter().map(|&t| Input::Token(t)))
            .collect()
    }

    /// Run `inputs` as the next positions of `seq`, writing their KV through
    /// `cache`. Returns logits for the last input.
    pub fn forward(
        &self,
        adapters: &AdapterStack,
        inputs: &[Input<'_>],
        cache: &mut dyn KvStore,
        seq: SeqId,
    ) -> Result<Vec<f32>> {
        let mut all = self.run(adapters, inputs, cache, seq, false)?;
        all.pop()
            .ok_or_else(|| Error::invalid("forward called with no inputs"))
    }

    /// As [`Model::forward`] but returns logits at every input position.
    pub fn forward_all(
        &self,
        adapters: &AdapterStack,
        inputs: &[Input<'_>],
        cache: &mut dyn KvStore,
        seq: SeqId,
    ) -> Result<Vec<Vec<f32>>> {
        self.run(adapters, inputs, cache, seq, true)
    }

    fn run(
        &self,
        adapters: &AdapterStack,
        inputs: &[Input<'_>],
        cache: &mut dyn KvStore,
        seq: SeqId,
        all_logits: bool,
    ) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let payload_len = cfg.kv_payload_len();
        if cache.payload_len() != payload_len {
            return Err(Error::CacheInconsistency(format!(
                "cache payload {} != model payload {payload_len}",
                cache.payload_len()
            )));
        }
        for a in adapters {
            a.check_compatible(cfg)?;
        }
        let start = cache.filled(seq)?;
        if start + inputs.len() > cfg.max_positions {
            return Err(Error::PositionOverflow {
                position: start + inputs.len() - 1,
                max: cfg.max_positions,
            });
        }
        for (i, input) in inputs.iter().enumerate() {
            let pos = start + i;
            match *input {
                Input::Condition(c) if pos >= cfg.condition_len || c.len() != d => {
                    return Err(Error::CacheInconsistency(format!(
                        "condition input at position {pos} (condition_len {}, width {})",
                        cfg.condition_len,
                        c.len()
                    )));
                }
                Input::Token(t) if pos < cfg.condition_len || t as usize >= self.vocab_size() => {
                    return Err(Error::CacheInconsistency(format!(
                        "token {t} at position {pos} (condition_len {})",
                        cfg.condition_len
                    )));
                }
                _ => {}
            }
        }
        cache.ensure_capacity(seq, inputs.len())?;

        let mut history = cache.gather(seq, start)?;
        let mut s = Scratch::new(cfg);
        let mut out = Vec::new();
        for (i, input) in inputs.iter().enumerate() {
            let pos = start + i;
            let emb = match *input {
                Input::Condition(c) => c,
                Input::Token(t) => self.tok_emb.row(t as usize),
            };
            for ((x, e), p) in s.x.iter_mut().zip(emb).zip(self.pos_emb.row(pos)) {
                *x = e + p;
            }
            let mut payload = vec![0.0f32; payload_len];
            for (l, block) in self.blocks.iter().enumerate() {
                block.ln1.apply(&s.x, &mut s.xn);
                self.project(adapters, l, Target::Q, &s.xn, &mut s.q, &mut s.lora);
                let kv = &mut payload[l * 2 * d..(l + 1) * 2 * d];
                let (k, v) = kv.split_at_mut(d);
                self.project(adapters, l, Target::K, &s.xn, k, &mut s.lora);
                self.project(adapters, l, Target::V, &s.xn, v, &mut s.lora);
                attend(cfg, l, pos, &s.q, &history, k, v, &mut s.attn, &mut s.scores);
                self.project(adapters, l, Target::O, &s.attn, &mut s.xn, &mut s.lora);
                for (x, o) in s.x.iter_mut().zip(&s.xn) {
                    *x += o;
                }
                block.ln2.apply(&s.x, &mut s.xn);
                block.ffn1.matvec(&s.xn, &mut s.hidden);
                for h in &mut s.hidden {
                    *h = gelu(*h);
                }
                block.ffn2.matvec(&s.hidden, &mut s.xn);
                for (x, o) in s.x.iter_mut().zip(&s.xn) {
                    *x += o;
                }
            }
            cache.append_kv(seq, &payload)?;
            history.extend_from_slice(&payload);
            if all_logits || i + 1 == inputs.len() {
                out.push(self.logits(&s.x, &mut s.xn));
            }
        }
        Ok(out)
    }

    fn logits(&self, x: &[f32], scratch: &mut [f32]) -> Vec<f32> {
        self.ln_f.apply(x, scratch);
        let mut logits = vec![0.0; self.lm_head.rows()];
        self.lm_head.matvec(scratch, &mut logits);
        if let Some(bias) = &self.logit_bias {
            for (l, b) in logits.iter_mut().zip(bias) {
                *l += b;
            }
        }
        logits
    }

    /// `out = W·x + Σ_adapters scale · B·(A·x)`
    fn project(
        &self,
        adapters: &AdapterStack,
        layer: usize,
        target: Target,
        x: &[f32],
        out: &mut [f32],
        lora: &mut LoraScratch,
    ) {
        self.blocks[layer].attn[target as usize].matvec(x, out);
        for a in adapters {
            let Some(f) = a.factors(layer, target) else {
                continue;
            };
            let scale = a.scale();
            lora.low.resize(a.rank, 0.0);
            f.a.matvec(x, &mut lora.low);
            lora.up.resize(out.len(), 0.0);
            f.b.matvec(&lora.low, &mut lora.up);
            for (o, u) in out.iter_mut().zip(&lora.up) {
                *o += scale * u;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attend(
    cfg: &ModelConfig,
    layer: usize,
    pos: usize,
    q: &[f32],
    history: &[f32],
    k_cur: &[f32],
    v_cur: &[f32],
    out: &mut [f32],
    scores: &mut Vec<f32>,
) {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let stride = cfg.kv_payload_len();
    let inv_sqrt = 1.0 / (hd as f32).sqrt();
    let key = |j: usize| -> &[f32] {
        if j == pos {
            k_cur
        } else {
            &history[j * stride + layer * 2 * d..j * stride + layer * 2 * d + d]
        }
    };
    let value = |j: usize| -> &[f32] {
        if j == pos {
            v_cur
        } else {
            &history[j * stride + layer * 2 * d + d..j * stride + (layer + 1) * 2 * d]
        }
    };
    for h in 0..cfg.n_heads {
        let r = h * hd..(h + 1) * hd;
        let qh = &q[r.clone()];
        scores.clear();
        let mut max = f32::NEG_INFINITY;
        for j in 0..=pos {
            let sc = dot(qh, &key(j)[r.clone()]) * inv_sqrt;
            max = max.max(sc);
            scores.push(sc);
        }
        let mut sum = 0.0f32;
        for sc in scores.iter_mut() {
            *sc = (*sc - max).exp();
            sum += *sc;
        }
        let oh = &mut out[r.clone()];
        oh.iter_mut().for_each(|o| *o = 0.0);
        for (j, w) in scores.iter().enumerate() {
            let w = w / sum;
            for (o, v) in oh.iter_mut().zip(&value(j)[r.clone()]) {
                *o += w * v;
            }
        }
    }
}

struct LoraScratch {
    low: Vec<f32>,
    up: Vec<f32>,
}

struct Scratch {
    x: Vec<f32>,
    xn: Vec<f32>,
    q: Vec<f32>,
    attn: Vec<f32>,
    hidden: Vec<f32>,
    scores: Vec<f32>,
    lora: LoraScratch,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            x: vec![0.0; d],
            xn: vec![0.0; d],
            q: vec![0.0; d],
            attn: vec![0.0; d],
            hidden: vec![0.0; cfg.ffn_dim],
            scores: Vec::new(),
            lora: LoraScratch {
                low: Vec::new(),
                up: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::lora::AdapterKind;
    use super::super::params::init_params;
    use super::*;
    use crate::kvcache::ContiguousKvCache;
    use crate::tokenspace::VocabLayout;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 32,
            max_positions: 64,
            vocab: VocabLayout::new(8, 24).unwrap(),
            condition_len: 2,
            prompt_dim: 9,
            seed: 11,
        }
    }

    fn run(model: &Model, adapters: &AdapterStack, tokens: &[u32]) -> Vec<Vec<f32>> {
        let cfg = model.config();
        let conds = vec![vec![0.01; cfg.d_model]; cfg.condition_len];
        let mut cache = ContiguousKvCache::new(cfg.kv_payload_len());
        cache.allocate_sequence(0).unwrap();
        model
            .forward_all(adapters, &Model::prefix_inputs(&conds, tokens), &mut cache, 0)
            .unwrap()
    }

    #[test]
    fn incremental_equals_one_shot() {
        let cfg = small_config();
        let model = Model::new(&init_params(&cfg).unwrap());
        let conds = vec![vec![0.03; 16]; 2];
        let tokens = [1, 5, 6, 2, 3, 20, 21];
        let full = run(&model, &[], &tokens);

        let mut cache = ContiguousKvCache::new(cfg.kv_payload_len());
        cache.allocate_sequence(9).unwrap();
        let inputs = Model::prefix_inputs(&conds, &tokens);
        let mut last = model.forward(&[], &inputs[..4], &mut cache, 9).unwrap();
        for inp in &inputs[4..] {
            last = model.forward(&[], std::slice::from_ref(inp), &mut cache, 9).unwrap();
        }
        // conditions differ (0.03 vs 0.01) so compare against a matching run
        let mut c2 = ContiguousKvCache::new(cfg.kv_payload_len());
        c2.allocate_sequence(0).unwrap();
        let one_shot = model.forward(&[], &inputs, &mut c2, 0).unwrap();
        assert_eq!(last, one_shot);
        assert_eq!(full.len(), 9);
    }

    #[test]
    fn empty_and_rank_zero_adapters_are_identity() {
        let cfg = small_config();
        let params = init_params(&cfg).unwrap();
        let model = Model::new(&params);
        let tokens = [1, 5, 2, 3, 10];
        let base = run(&model, &[], &tokens);
        let noop = Arc::new(LoraAdapter::random(&cfg, "z", AdapterKind::Domain, 0, 16.0, 1));
        assert_eq!(run(&model, &[noop], &tokens), base);
    }

    #[test]
    fn adapter_changes_logits_and_matches_merge() {
        let cfg = small_config();
        let params = init_params(&cfg).unwrap();
        let model = Model::new(&params);
        let stack = vec![
            Arc::new(LoraAdapter::random(&cfg, "d", AdapterKind::Domain, 4, 8.0, 2)),
            Arc::new(LoraAdapter::random(&cfg, "s", AdapterKind::Speaker, 2, 16.0, 3)),
        ];
        let tokens = [1, 5, 2, 3, 10, 11];
        let base = run(&model, &[], &tokens);
        let with = run(&model, &stack, &tokens);
        assert_ne!(base, with);
        let merged = run(&Model::merged(&params, &stack).unwrap(), &[], &tokens);
        for (a, b) in with.iter().flatten().zip(merged.iter().flatten()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
        let reversed: Vec<_> = stack.iter().rev().cloned().collect();
        let merged_rev = run(&Model::merged(&params, &reversed).unwrap(), &[], &tokens);
        for (a, b) in merged.iter().flatten().zip(merged_rev.iter().flatten()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn rejects_misplaced_inputs_and_overflow() {
        let cfg = small_config();
        let model = Model::new(&init_params(&cfg).unwrap());
        let mut cache = ContiguousKvCache::new(cfg.kv_payload_len());
        cache.allocate_sequence(0).unwrap();
        // token at a condition slot
        assert!(matches!(
            model.forward(&[], &[Input::Token(1)], &mut cache, 0),
            Err(Error::CacheInconsistency(_))
        ));
        let too_many = vec![Input::Token(1); 70];
        let c = vec![0.0; 16];
        let mut inputs = vec![Input::Condition(&c), Input::Condition(&c)];
        inputs.extend(too_many);
        assert!(matches!(
            model.forward(&[], &inputs, &mut cache, 0),
            Err(Error::PositionOverflow { .. })
        ));
        assert_eq!(cache.filled(0).unwrap(), 0);
    }

    #[test]
    fn logit_bias_hook() {
        let cfg = small_config();
        let model = Model::new(&init_params(&cfg).unwrap());
        let mut bias = vec![0.0; model.vocab_size()];
        bias[4] = 100.0;
        let biased = model.clone().with_logit_bias(bias).unwrap();
        let l = run(&biased, &[], &[1, 5, 2, 3]);
        assert!(l.last().unwrap()[4] > 99.0);
        assert!(model.with_logit_bias(vec![0.0; 3]).is_err());
    }
}
