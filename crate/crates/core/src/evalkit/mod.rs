//! Evaluation and preference-data tooling.
//!
//! PER is computed over codec-token sequences, with the toy codec's exact
//! inversion standing in for an ASR model. Bad-case detection uses three
//! machine-checkable proxies and the quality score is the base model's mean
//! log-probability.

pub mod badcase;
pub mod pairs;
pub mod per;

use std::io::BufRead;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toycodec::{self, Codec, PromptAudio};

pub use badcase::{bad_rate, bcr, detect_bad_cases, BadCaseConfig, BadCaseFlags, BadCaseReport};
pub use pairs::{apply_ranks, build_preference_pairs, overlap, HumanRank, PreferencePair, RatedSample, RatingSource};
pub use per::{per, PerReport};

/// One synthesized utterance as fed to `per`, `bcr` and the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// Tokens recovered from the audio.
    pub hypothesis: Vec<u32>,
    /// Tokens the engine logged.
    #[serde(default)]
    pub reference: Option<Vec<u32>>,
    #[serde(default = "yes")]
    pub terminated: bool,
    #[serde(default)]
    pub phone_count: Option<usize>,
    /// Prompt-vs-output similarity, when measured.
    #[serde(default)]
    pub sim: Option<f64>,
}

fn yes() -> bool {
    true
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a JSON-lines file; blank lines are skipped, errors carry the line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| schema(path, n + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Human ranks from a CSV with header `sentence_id,sample_index,rank`.
pub fn read_ranks_csv(path: &Path) -> Result<Vec<HumanRank>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| schema(path, 1, e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: HumanRank = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            schema(path, line, e.to_string())
        })?;
        out.push(row);
    }
    Ok(out)
}

/// PER of every record against its reference.
pub fn per_reports(records: &[UtteranceRecord]) -> Result<Vec<(String, PerReport)>> {
    records
        .iter()
        .map(|r| {
            let reference = r
                .reference
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("utterance {} has no reference", r.id)))?;
            Ok((r.id.clone(), per(reference, &r.hypothesis)?))
        })
        .collect()
}

pub fn bad_case_report(records: &[UtteranceRecord], cfg: &BadCaseConfig) -> Result<BadCaseReport> {
    let mut report = BadCaseReport::default();
    for r in records {
        let phones = r
            .phone_count
            .ok_or_else(|| Error::invalid(format!("utterance {} has no phone_count", r.id)))?;
        report.push(r.id.clone(), detect_bad_cases(&r.hypothesis, r.terminated, phones, cfg));
    }
    Ok(report)
}

/// Cosine similarity of the prompt features of two clips.
pub fn audio_sim(codec: &Codec, a: &PromptAudio, b: &PromptAudio) -> Result<f64> {
    toycodec::sim(&codec.prompt_features(a)?, &codec.prompt_features(b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn sim_report(values: &[f64]) -> Option<SimReport> {
    if values.is_empty() {
        return None;
    }
    Some(SimReport {
        count: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub system: String,
    pub utterances: usize,
    pub per: Option<f64>,
    pub bad_rate: Option<f64>,
    pub sim: Option<f64>,
}

/// Fill whichever columns the records support.
pub fn summarize(system: &str, records: &[UtteranceRecord], cfg: &BadCaseConfig) -> Summary {
    let per = if records.iter().all(|r| r.reference.is_some()) {
        per_reports(records)
            .ok()
            .and_then(|rs| PerReport::pooled(&rs.into_iter().map(|(_, r)| r).collect::<Vec<_>>()))
            .map(|r| r.rate)
    } else {
        None
    };
    let bad = if records.iter().all(|r| r.phone_count.is_some()) {
        bad_case_report(records, cfg).ok().and_then(|r| bad_rate(&r).ok())
    } else {
        None
    };
    let sims: Vec<f64> = records.iter().filter_map(|r| r.sim).collect();
    Summary {
        system: system.to_string(),
        utterances: records.len(),
        per,
        bad_rate: bad,
        sim: sim_report(&sims).map(|s| s.mean),
    }
}

/// Plain-text table with PER and bad rate as percentages and SIM as a
/// fraction; missing cells print `-`.
pub fn render_summary_table(rows: &[Summary]) -> String {
    let name_w = rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max("System".len());
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}%", x * 100.0));
    let mut out = format!("{:<name_w$}  {:>6}  {:>8}  {:>8}  {:>6}\n", "System", "N", "PER", "Bad", "SIM");
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>6}  {:>8}  {:>8}  {:>6}\n",
            r.system,
            r.utterances,
            pct(r.per),
            pct(r.bad_rate),
            r.sim.map_or("-".to_string(), |s| format!("{s:.3}")),
        ));
    }
    out
}
