//! Exactly invertible stand-in for a single-codebook neural codec.
//!
//! Codec token `t` renders as one frame of a zero-phase cosine centred on
//! DFT bin `t + 1` (a sine would vanish at the Nyquist bin); analysis picks the strongest bin in `1..=codec_count`.
//! The same spectral front end (per-frame log magnitude, mean-pooled)
//! provides prompt features for the condition slots and for SIM.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::codeclm::Model;
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub amplitude: f32,
    pub codec_count: u32,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            frame_len: 2048,
            amplitude: 0.5,
            codec_count: 1024,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if self.frame_len < 2 {
            return Err(bad("codec.frame_len", "must be >= 2".into()));
        }
        if self.codec_count as usize > self.frame_len / 2 {
            return Err(bad(
                "vocab.codec_count",
                format!(
                    "vocab.codec_count ({}) exceeds codec.frame_len / 2 ({})",
                    self.codec_count,
                    self.frame_len / 2
                ),
            ));
        }
        if self.sample_rate == 0 {
            return Err(bad("codec.sample_rate", "must be > 0".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(bad("codec.amplitude", "must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Frequency in Hz of token `t`.
    pub fn frequency(&self, t: u32) -> f64 {
        (t as f64 + 1.0) * self.sample_rate as f64 / self.frame_len as f64
    }

    /// Width of the pooled prompt feature vector.
    pub fn feature_dim(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frame_seconds(&self) -> f64 {
        self.frame_len as f64 / self.sample_rate as f64
    }
}

/// Mono PCM, signed 16-bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAudio {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

/// FFT-backed analyzer; build once and reuse across frames.
#[derive(Clone)]
pub struct Codec {
    spec: CodecSpec,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec").field("spec", &self.spec).finish()
    }
}

impl Codec {
    pub fn new(spec: CodecSpec) -> Result<Self> {
        spec.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(spec.frame_len);
        Ok(Self { spec, fft })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn token_to_frame(&self, t: u32) -> Result<Vec<i16>> {
        let spec = &self.spec;
        if t >= spec.codec_count {
            return Err(Error::invalid(format!(
                "codec token {t} out of range [0, {})",
                spec.codec_count
            )));
        }
        let k = (t + 1) as f64;
        let n = spec.frame_len as f64;
        Ok((0..spec.frame_len)
            .map(|i| {
                let x = spec.amplitude as f64
                    * (2.0 * std::f64::consts::PI * k * i as f64 / n).cos();
                (x * i16::MAX as f64).round() as i16
            })
            .collect())
    }

    fn spectrum(&self, frame: &[i16]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&s| Complex::new(s as f64 / 32768.0, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf
    }

    /// Strongest bin in `1..=codec_count`, minus one. An all-zero frame
    /// decodes to token 0.
    pub fn frame_to_token(&self, frame: &[i16]) -> Result<u32> {
        if frame.len() != self.spec.frame_len {
            return Err(Error::invalid(format!(
                "frame has {} samples, expected {}",
                frame.len(),
                self.spec.frame_len
            )));
        }
        let spec = self.spectrum(frame);
        let mut best = 1usize;
        for k in 2..=self.spec.codec_count as usize {
            if spec[k].norm_sqr() > spec[best].norm_sqr() {
                best = k;
            }
        }
        Ok(best as u32 - 1)
    }

    /// Concatenated frames for a token sequence.
    pub fn render(&self, tokens: &[u32]) -> Result<Vec<i16>> {
        let mut out = Vec::with_capacity(tokens.len() * self.spec.frame_len);
        for &t in tokens {
            out.extend(self.token_to_frame(t)?);
        }
        Ok(out)
    }

    /// Inverse of [`Codec::render`]; length must be a whole number of frames.
    pub fn analyze(&self, pcm: &[i16]) -> Result<Vec<u32>> {
        if !pcm.len().is_multiple_of(self.spec.frame_len) {
            return Err(Error::invalid(format!(
                "{} samples is not a whole number of {}-sample frames",
                pcm.len(),
                self.spec.frame_len
            )));
        }
        pcm.chunks_exact(self.spec.frame_len)
            .map(|f| self.frame_to_token(f))
            .collect()
    }

    /// Mean over whole frames of the per-bin log magnitude
    /// `ln(floor + |X_k| / (F/2))`, bins `0..=F/2`. Samples past the last
    /// whole frame are ignored.
    pub fn prompt_features(&self, audio: &PromptAudio) -> Result<Vec<f32>> {
        let f = self.spec.frame_len;
        if audio.samples.len() < f {
            return Err(Error::invalid(format!(
                "prompt audio has {} samples, at least one {f}-sample frame is required",
                audio.samples.len()
            )));
        }
        let bins = self.spec.feature_dim();
        let mut acc = vec![0.0f64; bins];
        let frames = audio.samples.chunks_exact(f);
        let count = frames.len();
        let norm = f as f64 / 2.0;
        for frame in frames {
            let spec = self.spectrum(frame);
            for (a, x) in acc.iter_mut().zip(&spec[..bins]) {
                *a += (LOG_FLOOR + x.norm() / norm).ln();
            }
        }
        Ok(acc.into_iter().map(|a| (a / count as f64) as f32).collect())
    }

    /// Condition-slot embeddings: pooled prompt features through the
    /// model's seeded condition projection.
    pub fn prompt_embed(&self, audio: &PromptAudio, model: &Model) -> Result<Vec<Vec<f32>>> {
        model.condition_embeddings(&self.prompt_features(audio)?)
    }
}

/// Cosine similarity.
pub fn sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    // sqrt of the product keeps sim(a, a) exactly 1
    Ok((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub fn pcm_to_le_bytes(pcm: &[i16]) -> Vec<u8> {
    pcm.iter().flat_map(|s| s.to_le_bytes()).collect()
}

pub fn pcm_from_le_bytes(bytes: &[u8]) -> Result<Vec<i16>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::invalid("odd byte count for s16le PCM"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

pub fn wav_bytes(audio: &PromptAudio) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cur, wav_spec(audio.sample_rate))?;
        for &s in &audio.samples {
            w.write_sample(s)?;
        }
        w.finalize()?;
    }
    Ok(cur.into_inner())
}

pub fn write_wav(path: &Path, audio: &PromptAudio) -> Result<()> {
    let bytes = wav_bytes(audio)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn parse_wav(bytes: &[u8]) -> Result<PromptAudio> {
    let reader = hound::WavReader::new(Cursor::new(bytes))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::invalid(format!(
            "only PCM s16le mono is supported (got {} ch, {} bit, {:?})",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader.into_samples::<i16>().collect::<std::result::Result<_, _>>()?;
    Ok(PromptAudio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

pub fn read_wav(path: &Path) -> Result<PromptAudio> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_wav(&bytes)
}

/// Built-in prompts usable by name on the wire and the CLI.
pub fn preset_prompt(codec: &Codec, name: &str) -> Result<PromptAudio> {
    let spec = codec.spec();
    let tokens: Vec<u32> = match name {
        "silence" => {
            return Ok(PromptAudio {
                samples: vec![0; spec.frame_len * 4],
                sample_rate: spec.sample_rate,
            })
        }
        "neutral" => vec![10, 40, 90, 160],
        "bright" => vec![300, 420, 610, 800],
        "low" => vec![2, 5, 9, 14],
        other => return Err(Error::invalid(format!("unknown prompt preset '{other}'"))),
    };
    let tokens: Vec<u32> = tokens.into_iter().map(|t| t % spec.codec_count).collect();
    Ok(PromptAudio {
        samples: codec.render(&tokens)?,
        sample_rate: spec.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn codec() -> Codec {
        Codec::new(CodecSpec::default()).unwrap()
    }

    #[test]
    fn token_zero_frequency() {
        assert_eq!(CodecSpec::default().frequency(0), 11.71875);
    }

    #[test]
    fn roundtrip_full_codebook() {
        let c = codec();
        for t in 0..1024 {
            assert_eq!(c.frame_to_token(&c.token_to_frame(t).unwrap()).unwrap(), t);
        }
        assert!(c.token_to_frame(1024).is_err());
    }

    #[test]
    fn distinct_tokens_orthogonal() {
        let c = codec();
        let a = c.token_to_frame(3).unwrap();
        let b = c.token_to_frame(500).unwrap();
        let norm = |x: &[i16]| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let ip: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        // relative to the frame energy, quantization leaves ~1e-5
        assert!(ip.abs() / norm(&a).sqrt() / norm(&b).sqrt() < 1e-4);
    }

    #[test]
    fn zero_frame_and_wrong_length() {
        let c = codec();
        assert_eq!(c.frame_to_token(&[0; 2048]).unwrap(), 0);
        assert!(c.frame_to_token(&[0; 100]).is_err());
    }

    fn with_noise(frame: &[i16], amp: f64, rng: &mut SplitMix64) -> Vec<i16> {
        frame
            .iter()
            .map(|&s| {
                let n = (rng.next_f64() * 2.0 - 1.0) * amp * 32767.0;
                (s as f64 + n).round().clamp(-32768.0, 32767.0) as i16
            })
            .collect()
    }

    #[test]
    fn survives_small_noise() {
        let c = codec();
        let mut rng = SplitMix64::new(8);
        for t in (0..1024).step_by(7) {
            let f = with_noise(&c.token_to_frame(t).unwrap(), 0.01, &mut rng);
            assert_eq!(c.frame_to_token(&f).unwrap(), t);
        }
    }

    /// Uniform noise amplitude (fraction of full scale) that the full
    /// codebook still survives with seed 8. Measured in 0.01 steps: first
    /// failure is near 2.47 (heavily clipped), so full scale is pinned.
    const NOISE_MARGIN: f64 = 1.0;

    #[test]
    fn noise_margin_regression() {
        let c = codec();
        let mut rng = SplitMix64::new(8);
        for t in 0..1024 {
            let f = with_noise(&c.token_to_frame(t).unwrap(), NOISE_MARGIN, &mut rng);
            assert_eq!(c.frame_to_token(&f).unwrap(), t, "token {t}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(sim(&[1.0], &[1.0, 0.0]).is_err());
        let mut rng = SplitMix64::new(3);
        for _ in 0..200 {
            let a: Vec<f32> = (0..32).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
            let b: Vec<f32> = (0..32).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
            let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((sim(&a, &b).unwrap() - (dot / (na * nb)) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn prompt_features_behaviour() {
        let c = codec();
        let audio = preset_prompt(&c, "neutral").unwrap();
        let a = c.prompt_features(&audio).unwrap();
        assert_eq!(a, c.prompt_features(&audio).unwrap());
        assert_eq!(a.len(), 1025);
        let loud = PromptAudio {
            samples: audio.samples.iter().map(|&s| s.saturating_mul(2)).collect(),
            ..audio.clone()
        };
        let b = c.prompt_features(&loud).unwrap();
        assert_ne!(a, b);
        let s = sim(&a, &b).unwrap();
        assert!(s >= 0.99, "{s}");
        assert!((s - SCALED_PROMPT_SIM).abs() < 1e-9, "{s}");

        let silence = c.prompt_features(&preset_prompt(&c, "silence").unwrap()).unwrap();
        assert!(silence.iter().all(|v| v.is_finite()));
        let short = PromptAudio {
            samples: vec![0; 10],
            sample_rate: 24_000,
        };
        assert!(c.prompt_features(&short).is_err());
    }

    const SCALED_PROMPT_SIM: f64 = 0.999_997_714_116_861;

    #[test]
    fn wav_roundtrip() {
        let c = codec();
        let audio = PromptAudio {
            samples: c.render(&[1, 2, 3]).unwrap(),
            sample_rate: 24_000,
        };
        let back = parse_wav(&wav_bytes(&audio).unwrap()).unwrap();
        assert_eq!(back, audio);
        assert!(parse_wav(b"RIFFnope").is_err());
        assert_eq!(pcm_from_le_bytes(&pcm_to_le_bytes(&audio.samples)).unwrap(), audio.samples);
    }

    #[test]
    fn spec_validation() {
        let spec = CodecSpec {
            codec_count: 1025,
            ..CodecSpec::default()
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("codec_count") && err.contains("frame_len"), "{err}");
    }
}
