use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatedSample {
    pub sentence_id: String,
    pub sample_index: usize,
    #[serde(default)]
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub per_rate: Option<f64>,
    /// Mean log-probability under the base model, standing in for a MOS
    /// predictor.
    #[serde(default)]
    pub quality_proxy: Option<f64>,
    #[serde(default)]
    pub human_rank: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingSource {
    Objective,
    Subjective,
}

impl std::str::FromStr for RatingSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "objective" => Ok(Self::Objective),
            "subjective" => Ok(Self::Subjective),
            other => Err(Error::invalid(format!("unknown rating source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub sentence_id: String,
    pub chosen: usize,
    pub rejected: usize,
    pub source: RatingSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRank {
    pub sentence_id: String,
    pub sample_index: usize,
    pub rank: u32,
}

/// Copy ranks onto the matching samples. Every rank row must name a sample.
pub fn apply_ranks(samples: &mut [RatedSample], ranks: &[HumanRank]) -> Result<()> {
    let mut index: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        index.insert((s.sentence_id.as_str(), s.sample_index), i);
    }
    let mut updates = Vec::with_capacity(ranks.len());
    for r in ranks {
        let &i = index
            .get(&(r.sentence_id.as_str(), r.sample_index))
            .ok_or_else(|| Error::invalid(format!("rank for unknown sample {}#{}", r.sentence_id, r.sample_index)))?;
        updates.push((i, r.rank));
    }
    for (i, rank) in updates {
        samples[i].human_rank = Some(rank);
    }
    Ok(())
}

/// Group samples by sentence, checking sample indices are unique and there
/// are at least two per sentence.
pub fn group_by_sentence(samples: &[RatedSample]) -> Result<BTreeMap<&str, Vec<&RatedSample>>> {
    let mut groups: BTreeMap<&str, Vec<&RatedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.sentence_id).or_default().push(s);
    }
    for (id, g) in &mut groups {
        g.sort_by_key(|s| s.sample_index);
        if g.len() < 2 {
            return Err(Error::invalid(format!("sentence {id} has {} sample(s); need at least 2", g.len())));
        }
        if g.windows(2).any(|w| w[0].sample_index == w[1].sample_index) {
            return Err(Error::invalid(format!("sentence {id} repeats a sample index")));
        }
    }
    Ok(groups)
}

struct Objective {
    per: f64,
    quality: f64,
    index: usize,
}

/// Lower is better: PER ascending, quality descending, index ascending.
fn objective_order(a: &Objective, b: &Objective) -> Ordering {
    a.per
        .total_cmp(&b.per)
        .then(b.quality.total_cmp(&a.quality))
        .then(a.index.cmp(&b.index))
}

fn objective_of(s: &RatedSample) -> Result<Objective> {
    let per = s
        .per_rate
        .ok_or_else(|| Error::invalid(format!("sample {}#{} has no per_rate", s.sentence_id, s.sample_index)))?;
    let quality = s
        .quality_proxy
        .ok_or_else(|| Error::invalid(format!("sample {}#{} has no quality_proxy", s.sentence_id, s.sample_index)))?;
    if !per.is_finite() || per < 0.0 || !quality.is_finite() {
        return Err(Error::invalid(format!(
            "sample {}#{} has an invalid rating",
            s.sentence_id, s.sample_index
        )));
    }
    Ok(Objective {
        per,
        quality,
        index: s.sample_index,
    })
}

/// One chosen/rejected pair per sentence. The chosen sample is the best
/// under the source's order and the rejected one the worst under the same
/// order; sentences whose best and worst tie on every rating get no pair.
pub fn build_preference_pairs(samples: &[RatedSample], source: RatingSource) -> Result<Vec<PreferencePair>> {
    let groups = group_by_sentence(samples)?;
    let mut pairs = Vec::new();
    for (id, group) in groups {
        let pick = match source {
            RatingSource::Objective => {
                let rated = group.iter().map(|s| objective_of(s)).collect::<Result<Vec<_>>>()?;
                let best = rated.iter().min_by(|a, b| objective_order(a, b)).unwrap();
                let worst = rated.iter().max_by(|a, b| objective_order(a, b)).unwrap();
                (best.per != worst.per || best.quality != worst.quality).then_some((best.index, worst.index))
            }
            RatingSource::Subjective => {
                let rated = group
                    .iter()
                    .map(|s| {
                        s.human_rank.map(|r| (r, s.sample_index)).ok_or_else(|| {
                            Error::invalid(format!("sample {}#{} has no human rank", s.sentence_id, s.sample_index))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let best = rated.iter().min().unwrap();
                let worst = rated.iter().max().unwrap();
                (best.0 != worst.0).then_some((best.1, worst.1))
            }
        };
        if let Some((chosen, rejected)) = pick {
            pairs.push(PreferencePair {
                sentence_id: id.to_string(),
                chosen,
                rejected,
                source,
            });
        }
    }
    Ok(pairs)
}

/// Fraction of sentences on which two pair sets agree exactly.
///
/// The denominator is every sentence that has a pair in either set; a
/// sentence paired by only one source counts as a disagreement.
pub fn overlap(a: &[PreferencePair], b: &[PreferencePair]) -> Result<f64> {
    let index = |ps: &[PreferencePair]| -> Result<BTreeMap<String, (usize, usize)>> {
        let mut m = BTreeMap::new();
        for p in ps {
            if m.insert(p.sentence_id.clone(), (p.chosen, p.rejected)).is_some() {
                return Err(Error::invalid(format!("two pairs for sentence {}", p.sentence_id)));
            }
        }
        Ok(m)
    };
    let (ia, ib) = (index(a)?, index(b)?);
    let universe: BTreeSet<&String> = ia.keys().chain(ib.keys()).collect();
    if universe.is_empty() {
        return Err(Error::invalid("overlap over an empty sentence set"));
    }
    let agree = universe
        .iter()
        .filter(|id| matches!((ia.get(**id), ib.get(**id)), (Some(x), Some(y)) if x == y))
        .count();
    Ok(agree as f64 / universe.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample(sid: &str, idx: usize, per: f64, q: f64) -> RatedSample {
        RatedSample {
            sentence_id: sid.into(),
            sample_index: idx,
            tokens: vec![],
            per_rate: Some(per),
            quality_proxy: Some(q),
            human_rank: None,
        }
    }

    #[test]
    fn simple_objective() {
        let s = vec![sample("a", 0, 0.0, -1.0), sample("a", 1, 0.3, -1.0)];
        let p = build_preference_pairs(&s, RatingSource::Objective).unwrap();
        assert_eq!((p[0].chosen, p[0].rejected), (0, 1));
    }

    #[test]
    fn degenerate_group_has_no_pair() {
        let s: Vec<_> = (0..5).map(|i| sample("a", i, 0.1, -2.0)).collect();
        assert!(build_preference_pairs(&s, RatingSource::Objective).unwrap().is_empty());
    }

    #[test]
    fn missing_ratings_rejected() {
        let mut s = vec![sample("a", 0, 0.0, -1.0), sample("a", 1, 0.3, -1.0)];
        assert!(build_preference_pairs(&s, RatingSource::Subjective).is_err());
        s[1].quality_proxy = None;
        assert!(build_preference_pairs(&s, RatingSource::Objective).is_err());
        assert!(build_preference_pairs(&s[..1], RatingSource::Objective).is_err());
    }

    /// Exhaustive scan: the chosen sample beats or ties every other sample
    /// under the lexicographic rule (tie on both metrics goes to the lower
    /// index), and the rejected sample loses to or ties every other one
    /// (tie goes to the higher index).
    fn scan(group: &[RatedSample]) -> Option<(usize, usize)> {
        let better = |a: &RatedSample, b: &RatedSample| -> bool {
            let (pa, pb) = (a.per_rate.unwrap(), b.per_rate.unwrap());
            let (qa, qb) = (a.quality_proxy.unwrap(), b.quality_proxy.unwrap());
            pa < pb || (pa == pb && qa > qb) || (pa == pb && qa == qb && a.sample_index < b.sample_index)
        };
        let mut chosen = None;
        let mut rejected = None;
        for a in group {
            if group.iter().all(|b| a.sample_index == b.sample_index || better(a, b)) {
                chosen = Some(a);
            }
            if group.iter().all(|b| a.sample_index == b.sample_index || better(b, a)) {
                rejected = Some(a);
            }
        }
        let (c, r) = (chosen.unwrap(), rejected.unwrap());
        if c.per_rate == r.per_rate && c.quality_proxy == r.quality_proxy {
            None
        } else {
            Some((c.sample_index, r.sample_index))
        }
    }

    #[test]
    fn matches_pair_scan_on_random_tables() {
        let mut rng = SplitMix64::new(99);
        for t in 0..200 {
            let n = 2 + rng.below(5) as usize;
            // coarse values so ties are common
            let group: Vec<_> = (0..n)
                .map(|i| sample("s", i, rng.below(3) as f64 * 0.1, -(rng.below(3) as f64)))
                .collect();
            let got = build_preference_pairs(&group, RatingSource::Objective).unwrap();
            let want = scan(&group);
            assert_eq!(got.first().map(|p| (p.chosen, p.rejected)), want, "table {t}");
        }
    }

    #[test]
    fn subjective_uses_rank_extremes() {
        let mut s: Vec<_> = (0..4).map(|i| sample("a", i, 0.0, 0.0)).collect();
        apply_ranks(
            &mut s,
            &[(0, 3), (1, 1), (2, 4), (3, 2)].map(|(i, r)| HumanRank {
                sentence_id: "a".into(),
                sample_index: i,
                rank: r,
            }),
        )
        .unwrap();
        let p = build_preference_pairs(&s, RatingSource::Subjective).unwrap();
        assert_eq!((p[0].chosen, p[0].rejected), (1, 2));
    }

    #[test]
    fn overlap_rules() {
        let p = |id: &str, c, r| PreferencePair {
            sentence_id: id.into(),
            chosen: c,
            rejected: r,
            source: RatingSource::Objective,
        };
        let a = vec![p("1", 0, 1), p("2", 2, 3)];
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        let b = vec![p("1", 1, 0), p("2", 3, 2)];
        assert_eq!(overlap(&a, &b).unwrap(), 0.0);
        let c = vec![p("1", 0, 1), p("3", 0, 1)];
        assert!((overlap(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap(&a, &c).unwrap(), overlap(&c, &a).unwrap());
        assert!(overlap(&[], &[]).is_err());
    }
}
