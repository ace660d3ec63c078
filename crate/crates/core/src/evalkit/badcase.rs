use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BadCaseConfig {
    pub frames_per_phone: f64,
    /// Allowed relative deviation from the expected length.
    pub length_tolerance: f64,
    pub ngram: usize,
    /// Consecutive occurrences of one n-gram that count as a loop.
    pub min_repeats: usize,
}

impl Default for BadCaseConfig {
    fn default() -> Self {
        Self {
            frames_per_phone: 4.0,
            length_tolerance: 0.3,
            ngram: 4,
            min_repeats: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadCaseFlags {
    pub length_anomaly: bool,
    pub repetition_loop: bool,
    pub no_termination: bool,
}

impl BadCaseFlags {
    pub fn any(&self) -> bool {
        self.length_anomaly || self.repetition_loop || self.no_termination
    }
}

pub fn detect_bad_cases(
    codec: &[u32],
    terminated: bool,
    expected_phone_count: usize,
    cfg: &BadCaseConfig,
) -> BadCaseFlags {
    let expected = expected_phone_count as f64 * cfg.frames_per_phone;
    BadCaseFlags {
        length_anomaly: (codec.len() as f64 - expected).abs() > cfg.length_tolerance * expected,
        repetition_loop: has_repetition_loop(codec, cfg.ngram, cfg.min_repeats),
        no_termination: !terminated,
    }
}

/// True when some `n`-gram occurs `repeats` times back to back.
pub fn has_repetition_loop(seq: &[u32], n: usize, repeats: usize) -> bool {
    if n == 0 || repeats == 0 {
        return false;
    }
    let span = n * repeats;
    if seq.len() < span {
        return false;
    }
    (0..=seq.len() - span).any(|i| {
        let gram = &seq[i..i + n];
        (1..repeats).all(|r| &seq[i + r * n..i + (r + 1) * n] == gram)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceFlags {
    pub id: String,
    pub flags: BadCaseFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BadCaseReport {
    pub utterances: Vec<UtteranceFlags>,
}

impl BadCaseReport {
    pub fn push(&mut self, id: impl Into<String>, flags: BadCaseFlags) {
        self.utterances.push(UtteranceFlags { id: id.into(), flags });
    }

    /// Utterances with at least one flag.
    pub fn bad_count(&self) -> usize {
        self.utterances.iter().filter(|u| u.flags.any()).count()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Bad cases per hundred utterances; the set must hold exactly 100.
pub fn bcr(report: &BadCaseReport) -> Result<f64> {
    if report.len() != 100 {
        return Err(Error::invalid(format!(
            "bcr needs exactly 100 utterances, got {}; use bad_rate",
            report.len()
        )));
    }
    Ok(report.bad_count() as f64 / 100.0)
}

/// B / N for any non-empty set.
pub fn bad_rate(report: &BadCaseReport) -> Result<f64> {
    if report.is_empty() {
        return Err(Error::invalid("bad_rate over zero utterances"));
    }
    Ok(report.bad_count() as f64 / report.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(len: usize) -> Vec<u32> {
        (0..len as u32).collect()
    }

    #[test]
    fn flags() {
        let cfg = BadCaseConfig::default();
        assert!(detect_bad_cases(&clean(40), false, 10, &cfg).no_termination);
        let looped: Vec<u32> = [1, 2, 3, 4].repeat(5);
        assert!(detect_bad_cases(&looped, true, 5, &cfg).repetition_loop);
        let three: Vec<u32> = [1, 2, 3, 4].repeat(3);
        assert!(!has_repetition_loop(&three, 4, 4));
        let f = detect_bad_cases(&clean(41), true, 10, &cfg);
        assert!(!f.any());
        assert!(!detect_bad_cases(&clean(52), true, 10, &cfg).length_anomaly);
        assert!(detect_bad_cases(&clean(53), true, 10, &cfg).length_anomaly);
        assert!(detect_bad_cases(&clean(27), true, 10, &cfg).length_anomaly);
    }

    #[test]
    fn loop_found_mid_sequence() {
        let mut s = vec![9, 8, 7];
        s.extend([5, 6, 5, 7].repeat(4));
        s.push(1);
        assert!(has_repetition_loop(&s, 4, 4));
    }

    #[test]
    fn rates() {
        let mut r = BadCaseReport::default();
        for i in 0..100 {
            let bad = i == 10 || i == 50;
            r.push(i.to_string(), BadCaseFlags { no_termination: bad, ..Default::default() });
        }
        assert_eq!(bcr(&r).unwrap(), 0.02);
        assert_eq!(bad_rate(&r).unwrap(), 0.02);
        r.push("x", BadCaseFlags::default());
        assert!(bcr(&r).is_err());
        assert!(bad_rate(&BadCaseReport::default()).is_err());
    }

    #[test]
    fn one_in_ninety_one() {
        let mut r = BadCaseReport::default();
        for i in 0..91 {
            r.push(i.to_string(), BadCaseFlags { repetition_loop: i == 0, ..Default::default() });
        }
        let rate = bad_rate(&r).unwrap();
        assert_eq!((rate * 1000.0).round() / 1000.0, 0.011);
    }

    #[test]
    fn bad_rate_monotone_under_flagged_additions() {
        let mut r = BadCaseReport::default();
        r.push("a", BadCaseFlags::default());
        let mut last = bad_rate(&r).unwrap();
        for i in 0..20 {
            r.push(i.to_string(), BadCaseFlags { length_anomaly: true, ..Default::default() });
            let now = bad_rate(&r).unwrap();
            assert!(now >= last);
            last = now;
        }
    }
}
