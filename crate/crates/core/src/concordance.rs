//! Harrell's concordance index for right-censored outcomes.
//!
//! A pair `(i, j)` is permissible when `i` had the event and either
//! `t_i < t_j`, or `t_i == t_j` and `j` is censored. It is concordant when
//! `i` carries the higher score; equal scores count one half. Pairs whose
//! members both had the event at the same time are not compared.
//!
//! Counting runs in `O(n log n)` with a Fenwick tree over score ranks, and
//! keeps exact integer tallies so results are reproducible bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One patient's outcome and predicted risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomePair {
    pub time: f64,
    pub event: bool,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl OutcomePair {
    pub fn new(time: f64, event: bool, score: f64) -> Self {
        Self {
            time,
            event,
            score,
            group: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// Pair tallies behind a c-index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub concordant: u64,
    pub tied_score: u64,
    pub permissible: u64,
}

impl PairCounts {
    /// `(concordant + tied / 2) / permissible`, or `None` without permissible pairs.
    pub fn value(&self) -> Option<f64> {
        (self.permissible > 0)
            .then(|| (2 * self.concordant + self.tied_score) as f64 / (2 * self.permissible) as f64)
    }
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn add(&mut self, rank: usize, delta: u64) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut acc = 0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
}

fn validate(time: f64, score: f64) -> Result<()> {
    if !(time.is_finite() && time > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "outcome time must be positive and finite, got {time}"
        )));
    }
    if !score.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "score must be finite, got {score}"
        )));
    }
    Ok(())
}

/// Pair tallies for parallel slices of times, event flags and scores.
pub fn pair_counts(times: &[f64], events: &[bool], scores: &[f64]) -> Result<PairCounts> {
    let n = times.len();
    if events.len() != n || scores.len() != n {
        return Err(Error::Shape(format!(
            "times ({n}), events ({}) and scores ({}) differ in length",
            events.len(),
            scores.len()
        )));
    }
    for i in 0..n {
        validate(times[i], scores[i])?;
    }

    // Dense score ranks; equal scores share a rank.
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0usize; n];
    let mut next = 0;
    for (k, &i) in by_score.iter().enumerate() {
        if k > 0 && scores[i] != scores[by_score[k - 1]] {
            next += 1;
        }
        rank[i] = next;
    }

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    // Walk groups of equal time from latest to earliest. The tree holds every
    // patient with a strictly later time plus the censored members of the
    // current group.
    let mut tree = Fenwick::new(next + 1);
    let mut in_tree = 0u64;
    let mut counts = PairCounts::default();
    let mut start = 0;
    while start < n {
        let t = times[by_time[start]];
        let end = by_time[start..]
            .iter()
            .position(|&i| times[i] != t)
            .map_or(n, |p| start + p);
        let group = &by_time[start..end];

        for &i in group.iter().filter(|&&i| !events[i]) {
            tree.add(rank[i], 1);
            in_tree += 1;
        }
        for &i in group.iter().filter(|&&i| events[i]) {
            let below = tree.below(rank[i]);
            let at_or_below = tree.below(rank[i] + 1);
            counts.concordant += below;
            counts.tied_score += at_or_below - below;
            counts.permissible += in_tree;
        }
        for &i in group.iter().filter(|&&i| events[i]) {
            tree.add(rank[i], 1);
            in_tree += 1;
        }
        start = end;
    }
    Ok(counts)
}

fn split(pairs: &[OutcomePair]) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let times = pairs.iter().map(|p| p.time).collect();
    let events = pairs.iter().map(|p| p.event).collect();
    let scores = pairs.iter().map(|p| p.score).collect();
    (times, events, scores)
}

/// Harrell's c-index.
pub fn cindex(pairs: &[OutcomePair]) -> Result<f64> {
    let (t, e, s) = split(pairs);
    cindex_slices(&t, &e, &s)
}

/// Harrell's c-index over parallel slices.
pub fn cindex_slices(times: &[f64], events: &[bool], scores: &[f64]) -> Result<f64> {
    pair_counts(times, events, scores)?
        .value()
        .ok_or(Error::UndefinedCindex)
}

/// c-index within each group label. Groups with no permissible pair map to
/// `None`; records without a group label go under `""`.
pub fn cindex_by_group(pairs: &[OutcomePair]) -> Result<BTreeMap<String, Option<f64>>> {
    let mut groups: BTreeMap<String, Vec<OutcomePair>> = BTreeMap::new();
    for p in pairs {
        groups
            .entry(p.group.clone().unwrap_or_default())
            .or_default()
            .push(p.clone());
    }
    groups
        .into_iter()
        .map(|(g, members)| {
            let (t, e, s) = split(&members);
            Ok((g, pair_counts(&t, &e, &s)?.value()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(times: &[f64], events: &[bool], scores: &[f64]) -> PairCounts {
        let mut c = PairCounts::default();
        for i in 0..times.len() {
            for j in 0..times.len() {
                if i == j || !events[i] {
                    continue;
                }
                let ok = times[i] < times[j] || (times[i] == times[j] && !events[j]);
                if ok {
                    c.permissible += 1;
                    if scores[i] > scores[j] {
                        c.concordant += 1;
                    } else if scores[i] == scores[j] {
                        c.tied_score += 1;
                    }
                }
            }
        }
        c
    }

    #[test]
    fn perfect_and_anti() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let e = [true; 4];
        assert_eq!(cindex_slices(&t, &e, &[4.0, 3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cindex_slices(&t, &e, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn six_patients_with_censoring() {
        let t = [5.0, 2.0, 9.0, 2.0, 7.0, 3.0];
        let e = [true, true, false, false, true, false];
        let s = [0.3, 0.9, -0.2, 0.9, 0.1, 0.5];
        assert_eq!(pair_counts(&t, &e, &s).unwrap(), brute(&t, &e, &s));
    }

    #[test]
    fn all_censored_is_undefined() {
        let t = [1.0, 2.0];
        let e = [false, false];
        assert_eq!(cindex_slices(&t, &e, &[0.0, 1.0]), Err(Error::UndefinedCindex));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(cindex_slices(&[0.0], &[true], &[1.0]).is_err());
        assert!(cindex_slices(&[1.0], &[true], &[f64::NAN]).is_err());
        assert!(cindex_slices(&[1.0, 2.0], &[true], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn groups() {
        let mut pairs = vec![];
        for (k, s) in [(1.0, 4.0), (2.0, 3.0), (3.0, 2.0)] {
            pairs.push(OutcomePair::new(k, true, s).with_group("a"));
            pairs.push(OutcomePair::new(k, true, -s).with_group("b"));
        }
        pairs.push(OutcomePair::new(1.0, false, 0.0).with_group("c"));
        pairs.push(OutcomePair::new(2.0, false, 1.0).with_group("c"));
        let by = cindex_by_group(&pairs).unwrap();
        assert_eq!(by["a"], Some(1.0));
        assert_eq!(by["b"], Some(0.0));
        assert_eq!(by["c"], None);

        let single: Vec<_> = pairs[..6]
            .iter()
            .filter(|p| p.group.as_deref() == Some("a"))
            .cloned()
            .collect();
        assert_eq!(
            cindex_by_group(&single).unwrap()["a"],
            Some(cindex(&single).unwrap())
        );
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            rows in prop::collection::vec((1u8..12, any::<bool>(), -4i8..4), 1..40)
        ) {
            let t: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let s: Vec<f64> = rows.iter().map(|r| f64::from(r.2)).collect();
            prop_assert_eq!(pair_counts(&t, &e, &s).unwrap(), brute(&t, &e, &s));
        }

        #[test]
        fn monotone_transform_invariance(
            rows in prop::collection::vec((1u8..30, any::<bool>(), -3.0f64..3.0), 2..40)
        ) {
            let t: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let s: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let s2: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(pair_counts(&t, &e, &s).unwrap(), pair_counts(&t, &e, &s2).unwrap());
        }

        #[test]
        fn reversal_complements(
            rows in prop::collection::vec((1u16..500, any::<bool>(), -1e3f64..1e3), 2..40)
        ) {
            let t: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
            let e: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let s: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            if let (Ok(a), Ok(b)) = (cindex_slices(&t, &e, &s), cindex_slices(&t, &e, &neg)) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }
}
