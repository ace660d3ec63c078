use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
    pub raw_edit_distance: usize,
    pub rate: f64,
}

impl PerReport {
    /// Pool several reports: total edits over total reference length.
    pub fn pooled(reports: &[PerReport]) -> Option<PerReport> {
        if reports.is_empty() {
            return None;
        }
        let mut out = PerReport {
            substitutions: 0,
            insertions: 0,
            deletions: 0,
            reference_len: 0,
            raw_edit_distance: 0,
            rate: 0.0,
        };
        for r in reports {
            out.substitutions += r.substitutions;
            out.insertions += r.insertions;
            out.deletions += r.deletions;
            out.reference_len += r.reference_len;
            out.raw_edit_distance += r.raw_edit_distance;
        }
        out.rate = out.raw_edit_distance as f64 / out.reference_len as f64;
        Some(out)
    }
}

/// Unit-cost Levenshtein alignment of `hypothesis` against `reference`.
///
/// Operation counts come from one optimal path; the backtrace prefers a
/// diagonal step (match or substitution), then an insertion, then a
/// deletion.
pub fn per<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<PerReport> {
    if reference.is_empty() {
        return Err(Error::invalid("PER reference is empty"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for (j, cell) in d[..w].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + cost == here {
                s += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    let dist = d[n * w + m];
    debug_assert_eq!(s + ins + del, dist);
    Ok(PerReport {
        substitutions: s,
        insertions: ins,
        deletions: del,
        reference_len: n,
        raw_edit_distance: dist,
        rate: dist as f64 / n as f64,
    })
}
