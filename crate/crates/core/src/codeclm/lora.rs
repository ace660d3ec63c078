//! Low-rank adapters over the attention projections, and the `TKLA`
//! container they are shipped in.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! b"TKLA" | version: u32 | meta_len: u32 | meta: UTF-8 JSON | f32 tensors
//! ```
//!
//! The metadata carries `name`, `kind`, `rank`, `alpha`, `d_model`,
//! `n_layers` and a tensor manifest (`name`, `shape`) listing the raw f32
//! data that follows, in order.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::params::ModelConfig;
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const MAGIC: &[u8; 4] = b"TKLA";
pub const VERSION: u32 = 1;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f32 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Domain,
    Speaker,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Domain => "domain",
            AdapterKind::Speaker => "speaker",
        })
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domain" => Ok(AdapterKind::Domain),
            "speaker" => Ok(AdapterKind::Speaker),
            other => Err(Error::invalid(format!("unknown adapter kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Q, Target::K, Target::V, Target::O];

    fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
        }
    }
}

/// Factor pair for one projection: `a` is `rank × d_in`, `b` is
/// `d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f32,
    /// `layers[l][target as usize]`; empty when rank is 0.
    pub layers: Vec<[LoraFactors; 4]>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f32 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f32
        }
    }

    pub fn factors(&self, layer: usize, target: Target) -> Option<&LoraFactors> {
        if self.rank == 0 {
            return None;
        }
        self.layers.get(layer).map(|t| &t[target as usize])
    }

    /// Seeded random factors. Training is out of scope; these stand in for
    /// fine-tuned deltas in tests, benches and demo adapters.
    pub fn random(
        config: &ModelConfig,
        name: impl Into<String>,
        kind: AdapterKind,
        rank: usize,
        alpha: f32,
        seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::new(seed);
        let d = config.d_model;
        let layers = if rank == 0 {
            Vec::new()
        } else {
            (0..config.n_layers)
                .map(|_| {
                    Target::ALL.map(|_| LoraFactors {
                        a: Matrix::random(rank, d, &mut rng),
                        b: Matrix::random(d, rank, &mut rng),
                    })
                })
                .collect()
        };
        Self {
            name: name.into(),
            kind,
            rank,
            alpha,
            layers,
        }
    }

    /// Dense delta `(alpha / rank) · B · A` for one projection.
    pub fn dense_delta(&self, layer: usize, target: Target) -> Option<Matrix> {
        let f = self.factors(layer, target)?;
        let scale = self.scale();
        let (d_out, d_in) = (f.b.rows, f.a.cols);
        let mut m = Matrix::zeros(d_out, d_in);
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = 0.0f64;
                for r in 0..self.rank {
                    acc += f.b.data[i * self.rank + r] as f64 * f.a.data[r * d_in + j] as f64;
                }
                m.data[i * d_in + j] = (scale as f64 * acc) as f32;
            }
        }
        Some(m)
    }

    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Ok(());
        }
        if self.layers.len() != config.n_layers {
            return Err(Error::BadContainer(format!(
                "adapter '{}' has {} layers, model has {}",
                self.name,
                self.layers.len(),
                config.n_layers
            )));
        }
        let d = config.d_model;
        for (l, targets) in self.layers.iter().enumerate() {
            for (t, f) in Target::ALL.iter().zip(targets) {
                if (f.a.rows, f.a.cols, f.b.rows, f.b.cols) != (self.rank, d, d, self.rank) {
                    return Err(Error::BadContainer(format!(
                        "adapter '{}' layer {l} target {}: shape mismatch with d_model {d}",
                        self.name,
                        t.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::new();
        let mut tensors: Vec<&Matrix> = Vec::new();
        for (l, targets) in self.layers.iter().enumerate() {
            for (t, f) in Target::ALL.iter().zip(targets) {
                for (part, m) in [("A", &f.a), ("B", &f.b)] {
                    manifest.push(TensorEntry {
                        name: format!("layers.{l}.{}.{part}", t.name()),
                        shape: [m.rows, m.cols],
                    });
                    tensors.push(m);
                }
            }
        }
        let meta = Metadata {
            name: self.name.clone(),
            kind: self.kind,
            rank: self.rank,
            alpha: self.alpha,
            n_layers: self.layers.len(),
            tensors: manifest,
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(12 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for m in tensors {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::BadContainer(m);
        if bytes.len() < 12 {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta_end = 12usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata length exceeds container".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[12..meta_end])
            .map_err(|e| bad(format!("metadata: {e}")))?;

        let mut data = &bytes[meta_end..];
        let mut next = |entry: &TensorEntry| -> Result<Matrix> {
            let n = entry.shape[0]
                .checked_mul(entry.shape[1])
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| bad(format!("tensor {} too large", entry.name)))?;
            if data.len() < n {
                return Err(bad(format!("tensor {} truncated", entry.name)));
            }
            let (head, rest) = data.split_at(n);
            data = rest;
            let v = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Matrix::from_vec(entry.shape[0], entry.shape[1], v))
        };

        let expected = if meta.rank == 0 { 0 } else { meta.n_layers * 8 };
        if meta.tensors.len() != expected {
            return Err(bad(format!(
                "manifest lists {} tensors, expected {expected}",
                meta.tensors.len()
            )));
        }
        let mut layers = Vec::with_capacity(meta.n_layers);
        let mut entries = meta.tensors.iter();
        if meta.rank > 0 {
            for l in 0..meta.n_layers {
                let mut factors = Vec::with_capacity(4);
                for t in Target::ALL {
                    let ea = entries.next().unwrap();
                    let eb = entries.next().unwrap();
                    for (e, part) in [(ea, "A"), (eb, "B")] {
                        let want = format!("layers.{l}.{}.{part}", t.name());
                        if e.name != want {
                            return Err(bad(format!("manifest order: got {}, expected {want}", e.name)));
                        }
                    }
                    if ea.shape[0] != meta.rank || eb.shape[1] != meta.rank {
                        return Err(bad(format!("{} rank mismatch", ea.name)));
                    }
                    factors.push(LoraFactors {
                        a: next(ea)?,
                        b: next(eb)?,
                    });
                }
                layers.push(factors.try_into().unwrap());
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        if !meta.alpha.is_finite() {
            return Err(bad("alpha is not finite".into()));
        }
        Ok(Self {
            name: meta.name,
            kind: meta.kind,
            rank: meta.rank,
            alpha: meta.alpha,
            layers,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    name: String,
    kind: AdapterKind,
    rank: usize,
    alpha: f32,
    n_layers: usize,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenspace::VocabLayout;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 32,
            vocab: VocabLayout::new(4, 8).unwrap(),
            condition_len: 1,
            prompt_dim: 5,
            seed: 1,
        }
    }

    #[test]
    fn container_roundtrip() {
        let a = LoraAdapter::random(&cfg(), "spk1", AdapterKind::Speaker, 3, 6.0, 5);
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..4], b"TKLA");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = LoraAdapter::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        back.check_compatible(&cfg()).unwrap();
    }

    #[test]
    fn rank_zero_has_no_tensors() {
        let a = LoraAdapter::random(&cfg(), "noop", AdapterKind::Domain, 0, 16.0, 5);
        assert_eq!(a.scale(), 0.0);
        assert!(a.dense_delta(0, Target::Q).is_none());
        assert_eq!(LoraAdapter::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let a = LoraAdapter::random(&cfg(), "x", AdapterKind::Domain, 2, 4.0, 1);
        let mut bytes = a.to_bytes();
        assert!(matches!(
            LoraAdapter::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::BadContainer(_))
        ));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = LoraAdapter::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.code(), "bad-container");
        assert!(LoraAdapter::from_bytes(b"TKLA").is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let a = LoraAdapter::random(&cfg(), "x", AdapterKind::Domain, 2, 4.0, 1);
        let mut other = cfg();
        other.d_model = 16;
        other.n_heads = 2;
        assert!(a.check_compatible(&other).is_err());
        other = cfg();
        other.n_layers = 3;
        assert!(a.check_compatible(&other).is_err());
    }

    #[test]
    fn dense_delta_matches_definition() {
        let a = LoraAdapter::random(&cfg(), "x", AdapterKind::Domain, 2, 4.0, 3);
        let f = a.factors(1, Target::V).unwrap();
        let m = a.dense_delta(1, Target::V).unwrap();
        let (i, j) = (3, 5);
        let expect = 2.0 * (f.b.data[i * 2] * f.a.data[j] + f.b.data[i * 2 + 1] * f.a.data[8 + j]);
        assert!((m.data[i * 8 + j] - expect).abs() < 1e-9);
    }
}
