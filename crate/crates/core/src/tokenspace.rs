//! Unified token vocabulary and conditional sequence layout.
//!
//! Id space: five specials (`PAD`, `BP`, `EP`, `S`, `E`), then the phoneme
//! inventory, then the codec codebook. A training sequence is laid out as
//! `[cond slots] BP phones.. EP S codec.. E`; condition slots carry
//! continuous embeddings and occupy positions `[0, condition_len)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BP: u32 = 1;
pub const EP: u32 = 2;
pub const S: u32 = 3;
pub const E: u32 = 4;
pub const SPECIAL_COUNT: u32 = 5;

pub const DEFAULT_CONDITION_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special,
    Phoneme,
    Codec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabLayout {
    phoneme_count: u32,
    codec_count: u32,
}

impl VocabLayout {
    pub fn new(phoneme_count: u32, codec_count: u32) -> Result<Self> {
        if phoneme_count == 0 || codec_count == 0 {
            return Err(Error::invalid(format!(
                "vocab counts must be >= 1 (phoneme_count={phoneme_count}, codec_count={codec_count})"
            )));
        }
        SPECIAL_COUNT
            .checked_add(phoneme_count)
            .and_then(|n| n.checked_add(codec_count))
            .ok_or_else(|| Error::invalid("vocab size overflows u32"))?;
        Ok(Self {
            phoneme_count,
            codec_count,
        })
    }

    pub fn phoneme_count(&self) -> u32 {
        self.phoneme_count
    }

    pub fn codec_count(&self) -> u32 {
        self.codec_count
    }

    pub fn phoneme_start(&self) -> u32 {
        SPECIAL_COUNT
    }

    pub fn codec_start(&self) -> u32 {
        SPECIAL_COUNT + self.phoneme_count
    }

    pub fn total_size(&self) -> u32 {
        SPECIAL_COUNT + self.phoneme_count + self.codec_count
    }

    pub fn classify(&self, id: u32) -> Option<TokenClass> {
        if id < SPECIAL_COUNT {
            Some(TokenClass::Special)
        } else if id < self.codec_start() {
            Some(TokenClass::Phoneme)
        } else if id < self.total_size() {
            Some(TokenClass::Codec)
        } else {
            None
        }
    }

    pub fn is_codec(&self, id: u32) -> bool {
        self.classify(id) == Some(TokenClass::Codec)
    }

    pub fn phoneme_id(&self, index: u32) -> Result<u32> {
        if index >= self.phoneme_count {
            return Err(Error::invalid(format!(
                "phoneme index {index} out of range [0, {})",
                self.phoneme_count
            )));
        }
        Ok(SPECIAL_COUNT + index)
    }

    pub fn codec_id(&self, index: u32) -> Result<u32> {
        if index >= self.codec_count {
            return Err(Error::invalid(format!(
                "codec index {index} out of range [0, {})",
                self.codec_count
            )));
        }
        Ok(self.codec_start() + index)
    }

    /// Codebook index of a codec-range id.
    pub fn codec_index(&self, id: u32) -> Option<u32> {
        self.is_codec(id).then(|| id - self.codec_start())
    }
}

/// Phoneme token ids (never `BP`/`EP`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSeq(Vec<u32>);

impl PhonemeSeq {
    pub fn new(vocab: &VocabLayout, ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("phoneme sequence is empty"));
        }
        if let Some(bad) = ids
            .iter()
            .find(|&&id| vocab.classify(id) != Some(TokenClass::Phoneme))
        {
            return Err(Error::invalid(format!("id {bad} is not a phoneme id")));
        }
        Ok(Self(ids))
    }

    /// Build from 0-based phoneme inventory indices, as accepted on the CLI
    /// and the wire.
    pub fn from_indices(vocab: &VocabLayout, indices: &[u32]) -> Result<Self> {
        let ids = indices
            .iter()
            .map(|&i| vocab.phoneme_id(i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodecSeq(Vec<u32>);

impl CodecSeq {
    pub fn new(vocab: &VocabLayout, ids: Vec<u32>) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&id| !vocab.is_codec(id)) {
            return Err(Error::invalid(format!("id {bad} is not a codec id")));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Codebook indices, i.e. ids shifted down to `[0, codec_count)`.
    pub fn indices(&self, vocab: &VocabLayout) -> Vec<u32> {
        self.0.iter().map(|&id| id - vocab.codec_start()).collect()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Boundaries {
    pub bp: usize,
    pub ep: usize,
    pub s: usize,
    pub e: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedSequence {
    condition_len: usize,
    token_ids: Vec<u32>,
    boundaries: Boundaries,
}

impl ComposedSequence {
    pub fn condition_len(&self) -> usize {
        self.condition_len
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn boundaries(&self) -> Boundaries {
        self.boundaries
    }

    /// Positions the model sees: condition slots plus token ids.
    pub fn total_positions(&self) -> usize {
        self.condition_len + self.token_ids.len()
    }

    pub fn is_complete(&self) -> bool {
        self.boundaries.e.is_some()
    }

    /// Append generated codec tokens and the end marker to an inference
    /// prefix, producing the training layout.
    pub fn complete_with(&self, codec: &CodecSeq) -> Result<Self> {
        if self.is_complete() {
            return Err(Error::invalid("sequence already terminated"));
        }
        let mut token_ids = self.token_ids.clone();
        token_ids.extend_from_slice(codec.ids());
        let e = token_ids.len();
        token_ids.push(E);
        Ok(Self {
            condition_len: self.condition_len,
            token_ids,
            boundaries: Boundaries {
                e: Some(e),
                ..self.boundaries
            },
        })
    }

    /// Validate an arbitrary id list against the layout and recover its
    /// boundaries.
    pub fn parse(vocab: &VocabLayout, condition_len: usize, token_ids: Vec<u32>) -> Result<Self> {
        if token_ids.first() != Some(&BP) {
            return Err(Error::invalid("sequence must begin with BP"));
        }
        let ep = token_ids
            .iter()
            .position(|&t| t == EP)
            .ok_or_else(|| Error::invalid("missing EP"))?;
        if ep < 2 {
            return Err(Error::invalid("no phonemes between BP and EP"));
        }
        PhonemeSeq::new(vocab, token_ids[1..ep].to_vec())?;
        let s = ep + 1;
        if token_ids.get(s) != Some(&S) {
            return Err(Error::invalid("S must immediately follow EP"));
        }
        let e = token_ids[s + 1..]
            .iter()
            .position(|&t| t == E)
            .map(|p| p + s + 1);
        if let Some(e) = e {
            if e + 1 != token_ids.len() {
                return Err(Error::invalid("E must be the final element"));
            }
        }
        let body_end = e.unwrap_or(token_ids.len());
        CodecSeq::new(vocab, token_ids[s + 1..body_end].to_vec())?;
        Ok(Self {
            condition_len,
            token_ids,
            boundaries: Boundaries { bp: 0, ep, s, e },
        })
    }

    /// Split a composed sequence back into its phoneme and codec parts.
    pub fn split(&self) -> (Vec<u32>, Vec<u32>) {
        let b = self.boundaries;
        let end = b.e.unwrap_or(self.token_ids.len());
        (
            self.token_ids[b.bp + 1..b.ep].to_vec(),
            self.token_ids[b.s + 1..end].to_vec(),
        )
    }
}

/// `[BP, phones.., EP, S, codec.., E]` with `condition_len` leading slots.
pub fn compose_training_sequence(
    condition_len: usize,
    phones: &PhonemeSeq,
    codec: &CodecSeq,
) -> Result<ComposedSequence> {
    compose_inference_prefix(condition_len, phones)?.complete_with(codec)
}

/// `[BP, phones.., EP, S]`; decoding appends after `S`.
pub fn compose_inference_prefix(
    condition_len: usize,
    phones: &PhonemeSeq,
) -> Result<ComposedSequence> {
    if phones.is_empty() {
        return Err(Error::invalid("phoneme sequence is empty"));
    }
    let mut token_ids = Vec::with_capacity(phones.len() + 3);
    token_ids.push(BP);
    token_ids.extend_from_slice(phones.ids());
    let ep = token_ids.len();
    token_ids.push(EP);
    token_ids.push(S);
    Ok(ComposedSequence {
        condition_len,
        token_ids,
        boundaries: Boundaries {
            bp: 0,
            ep,
            s: ep + 1,
            e: None,
        },
    })
}

/// True exactly at the positions the model is trained to predict: codec
/// tokens after `S` and the final `E`. Indexed over `token_ids` (condition
/// slots are never predicted).
pub fn prediction_mask(seq: &ComposedSequence) -> Result<Vec<bool>> {
    let s = seq
        .token_ids
        .iter()
        .position(|&t| t == S)
        .ok_or_else(|| Error::invalid("sequence has no S token"))?;
    Ok((0..seq.token_ids.len()).map(|i| i > s).collect())
}

/// Parse whitespace-separated phoneme indices.
pub fn parse_phone_line(line: &str) -> Result<Vec<u32>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Error::invalid(format!("'{t}' is not a phoneme index")))
        })
        .collect()
}

/// A `.phones` file: one utterance per line, blank lines and `#` comments
/// skipped.
pub fn read_phones_file(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_phone_line(line).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
