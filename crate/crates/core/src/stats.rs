//! Resampling inference on the c-index.
//!
//! Bootstrap resamples are event-stratified: events and censored patients are
//! drawn with replacement separately, so every resample keeps the original
//! event count. Resample `b` draws from its own ChaCha stream keyed by
//! `(seed, b)`, which makes results independent of how resamples are spread
//! over worker threads.

use std::thread;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concordance::{pair_counts, OutcomePair};
use crate::quantile::quantile_sorted;
use crate::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 4000;
/// Attempts per resample before giving up on drawing a defined c-index.
pub const MAX_REDRAWS: usize = 1000;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
            workers: 1,
        }
    }
}

impl BootstrapConfig {
    fn validate(&self) -> Result<()> {
        if self.resamples == 0 {
            return Err(Error::InvalidArgument("resamples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Patient indices split by event status.
#[derive(Debug, Clone)]
pub struct Strata {
    pub events: Vec<usize>,
    pub censored: Vec<usize>,
}

impl Strata {
    pub fn new(events: &[bool]) -> Self {
        let (ev, ce): (Vec<usize>, Vec<usize>) = (0..events.len()).partition(|&i| events[i]);
        Self {
            events: ev,
            censored: ce,
        }
    }

    /// One event-stratified resample of patient indices.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.events.len() + self.censored.len());
        for stratum in [&self.events, &self.censored] {
            for _ in 0..stratum.len() {
                out.push(stratum[rng.random_range(0..stratum.len())]);
            }
        }
        out
    }
}

/// The RNG for resample `index` under `seed`.
pub fn resample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs `f(b)` for every resample index, spread over `workers` threads, and
/// returns the results in index order.
fn run_indexed<T, F>(count: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    let lo = (w * chunk).min(count);
                    let hi = ((w + 1) * chunk).min(count);
                    (lo..hi).map(f).collect::<Vec<T>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("bootstrap worker panicked"))
            .collect()
    })
}

struct Columns {
    times: Vec<f64>,
    events: Vec<bool>,
    scores: Vec<f64>,
}

impl Columns {
    fn from_pairs(pairs: &[OutcomePair]) -> Self {
        Self {
            times: pairs.iter().map(|p| p.time).collect(),
            events: pairs.iter().map(|p| p.event).collect(),
            scores: pairs.iter().map(|p| p.score).collect(),
        }
    }

    fn cindex_at(&self, idx: &[usize]) -> Result<Option<f64>> {
        let t: Vec<f64> = idx.iter().map(|&i| self.times[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| self.events[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| self.scores[i]).collect();
        Ok(pair_counts(&t, &e, &s)?.value())
    }
}

/// Point estimate and 95% percentile interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub resamples: usize,
    /// Draws discarded because the resample had no permissible pair.
    pub redraws: usize,
}

/// Draws resample `b`, redrawing until `accept` yields a value.
fn draw_defined<T>(
    strata: &Strata,
    seed: u64,
    b: usize,
    mut accept: impl FnMut(&[usize]) -> Result<Option<T>>,
) -> Result<(T, usize)> {
    let mut rng = resample_rng(seed, b);
    for attempt in 0..MAX_REDRAWS {
        let idx = strata.draw(&mut rng);
        if let Some(v) = accept(&idx)? {
            return Ok((v, attempt));
        }
    }
    Err(Error::UndefinedCindex)
}

fn percentile_ci(mut values: Vec<f64>) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        quantile_sorted(&values, 0.025).expect("non-empty"),
        quantile_sorted(&values, 0.975).expect("non-empty"),
    )
}

/// c-index with an event-stratified percentile bootstrap interval.
pub fn bootstrap_ci(pairs: &[OutcomePair], cfg: &BootstrapConfig) -> Result<BootstrapCi> {
    cfg.validate()?;
    let cols = Columns::from_pairs(pairs);
    let estimate = cols
        .cindex_at(&(0..pairs.len()).collect::<Vec<_>>())?
        .ok_or(Error::UndefinedCindex)?;
    let strata = Strata::new(&cols.events);

    let draws = run_indexed(cfg.resamples, cfg.workers, |b| {
        draw_defined(&strata, cfg.seed, b, |idx| cols.cindex_at(idx))
    });
    let mut values = Vec::with_capacity(cfg.resamples);
    let mut redraws = 0;
    for d in draws {
        let (v, r) = d?;
        values.push(v);
        redraws += r;
    }
    if redraws > 0 {
        log::info!("bootstrap: redrew {redraws} resamples with undefined c-index");
    }
    let (ci_lower, ci_upper) = percentile_ci(values);
    Ok(BootstrapCi {
        estimate,
        ci_lower,
        ci_upper,
        resamples: cfg.resamples,
        redraws,
    })
}

/// Paired comparison of two models on the same patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    /// `cindex(A) - cindex(B)` on the full data.
    pub delta: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p: f64,
    /// FDR-adjusted p; equals `p` until a family adjustment is applied.
    pub q: f64,
    pub redraws: usize,
}

impl ComparisonResult {
    pub fn significant(&self) -> bool {
        self.q < SIGNIFICANCE_LEVEL
    }
}

fn check_paired(a: &[OutcomePair], b: &[OutcomePair]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::PatientMismatch(format!(
            "{} vs {} patients",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = a
        .iter()
        .zip(b)
        .position(|(x, y)| x.time != y.time || x.event != y.event)
    {
        return Err(Error::PatientMismatch(format!(
            "outcome of patient {i} differs between models"
        )));
    }
    Ok(())
}

/// Two-sided bootstrap p-value from tail counts, with the `(count + 1) / (B + 1)`
/// correction on each tail.
fn two_sided_p(le_zero: usize, ge_zero: usize, b: usize) -> f64 {
    let tail = |c: usize| (c + 1) as f64 / (b + 1) as f64;
    (2.0 * tail(le_zero).min(tail(ge_zero))).min(1.0)
}

/// Paired bootstrap of `cindex(A) - cindex(B)`.
///
/// Each resample draws one event-stratified index set and applies it to both
/// models.
pub fn paired_compare(
    a: &[OutcomePair],
    b: &[OutcomePair],
    cfg: &BootstrapConfig,
) -> Result<ComparisonResult> {
    cfg.validate()?;
    check_paired(a, b)?;
    let ca = Columns::from_pairs(a);
    let cb = Columns::from_pairs(b);
    let all: Vec<usize> = (0..a.len()).collect();
    let delta = match (ca.cindex_at(&all)?, cb.cindex_at(&all)?) {
        (Some(x), Some(y)) => x - y,
        _ => return Err(Error::UndefinedCindex),
    };
    let strata = Strata::new(&ca.events);

    let draws = run_indexed(cfg.resamples, cfg.workers, |r| {
        draw_defined(&strata, cfg.seed, r, |idx| {
            Ok(match (ca.cindex_at(idx)?, cb.cindex_at(idx)?) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            })
        })
    });
    let mut deltas = Vec::with_capacity(cfg.resamples);
    let mut redraws = 0;
    for d in draws {
        let (v, r) = d?;
        deltas.push(v);
        redraws += r;
    }
    let le = deltas.iter().filter(|&&d| d <= 0.0).count();
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count();
    let p = two_sided_p(le, ge, cfg.resamples);
    let (ci_lower, ci_upper) = percentile_ci(deltas);
    Ok(ComparisonResult {
        delta,
        ci_lower,
        ci_upper,
        p,
        q: p,
        redraws,
    })
}

/// Exact paired comparison over every event-stratified resample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactComparison {
    pub delta: f64,
    /// `2 * min(P(delta* <= 0), P(delta* >= 0))`, conditional on a defined
    /// c-index, clipped to 1.
    pub p: f64,
    /// Total probability mass of resamples with an undefined c-index.
    pub undefined_mass: f64,
}

/// Largest stratum size accepted by [`paired_compare_exact`].
pub const MAX_EXACT_STRATUM: usize = 8;

/// All multisets of size `n` over `n` items, as count vectors with their
/// multinomial probability under uniform draws with replacement.
fn multisets(n: usize) -> Vec<(Vec<usize>, f64)> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k + 1 == cur.len() {
            cur[k] = left;
            out.push(cur.clone());
            return;
        }
        for c in 0..=left {
            cur[k] = c;
            rec(k + 1, left - c, cur, out);
        }
    }
    if n == 0 {
        return vec![(vec![], 1.0)];
    }
    let mut all = vec![];
    rec(0, n, &mut vec![0; n], &mut all);
    let ln_fact = |m: usize| (1..=m).map(|x| (x as f64).ln()).sum::<f64>();
    let ln_total = ln_fact(n) - n as f64 * (n as f64).ln();
    all.into_iter()
        .map(|counts| {
            let w = ln_total - counts.iter().map(|&c| ln_fact(c)).sum::<f64>();
            (counts, w.exp())
        })
        .collect()
}

/// Paired comparison with the bootstrap distribution enumerated exactly.
///
/// Only feasible for tiny cohorts: each stratum may hold at most
/// [`MAX_EXACT_STRATUM`] patients.
pub fn paired_compare_exact(a: &[OutcomePair], b: &[OutcomePair]) -> Result<ExactComparison> {
    check_paired(a, b)?;
    let ca = Columns::from_pairs(a);
    let cb = Columns::from_pairs(b);
    let strata = Strata::new(&ca.events);
    if strata.events.len() > MAX_EXACT_STRATUM || strata.censored.len() > MAX_EXACT_STRATUM {
        return Err(Error::InvalidArgument(format!(
            "exact enumeration supports at most {MAX_EXACT_STRATUM} patients per stratum"
        )));
    }
    let all: Vec<usize> = (0..a.len()).collect();
    let delta = match (ca.cindex_at(&all)?, cb.cindex_at(&all)?) {
        (Some(x), Some(y)) => x - y,
        _ => return Err(Error::UndefinedCindex),
    };

    let ev = multisets(strata.events.len());
    let ce = multisets(strata.censored.len());
    let (mut le, mut ge, mut defined, mut undefined) = (0.0, 0.0, 0.0, 0.0);
    for (ev_counts, ev_w) in &ev {
        for (ce_counts, ce_w) in &ce {
            let mut idx = vec![];
            for (stratum, counts) in [(&strata.events, ev_counts), (&strata.censored, ce_counts)] {
                for (&i, &c) in stratum.iter().zip(counts) {
                    idx.extend(std::iter::repeat_n(i, c));
                }
            }
            let w = ev_w * ce_w;
            match (ca.cindex_at(&idx)?, cb.cindex_at(&idx)?) {
                (Some(x), Some(y)) => {
                    let d = x - y;
                    defined += w;
                    if d <= 0.0 {
                        le += w;
                    }
                    if d >= 0.0 {
                        ge += w;
                    }
                }
                _ => undefined += w,
            }
        }
    }
    if defined <= 0.0 {
        return Err(Error::UndefinedCindex);
    }
    Ok(ExactComparison {
        delta,
        p: (2.0 * (le / defined).min(ge / defined)).min(1.0),
        undefined_mass: undefined,
    })
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!(
            "p-values must lie in [0, 1], got {bad}"
        )));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &i) in order.iter().enumerate().rev() {
        let adj = (p_values[i] * m as f64 / (rank0 + 1) as f64).max(p_values[i]);
        running = running.min(adj);
        q[i] = running;
    }
    Ok(q)
}

/// One named comparison within a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison {
    pub first: String,
    pub second: String,
    pub result: ComparisonResult,
}

/// All pairwise comparisons between named models, BH-adjusted as one family.
pub fn compare_family(
    models: &[(String, Vec<OutcomePair>)],
    cfg: &BootstrapConfig,
) -> Result<Vec<FamilyComparison>> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(
            "a comparison family needs at least two models".into(),
        ));
    }
    let mut rows = vec![];
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            rows.push(FamilyComparison {
                first: models[i].0.clone(),
                second: models[j].0.clone(),
                result: paired_compare(&models[i].1, &models[j].1, cfg)?,
            });
        }
    }
    let p: Vec<f64> = rows.iter().map(|r| r.result.p).collect();
    for (row, q) in rows.iter_mut().zip(bh_adjust(&p)?) {
        row.result.q = q;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(n: usize, scores: impl Fn(usize) -> f64) -> Vec<OutcomePair> {
        (0..n)
            .map(|i| OutcomePair::new((i + 1) as f64, i % 3 != 2, scores(i)))
            .collect()
    }

    #[test]
    fn constant_scores_give_degenerate_ci() {
        let pairs = fixture(30, |_| 1.0);
        let ci = bootstrap_ci(
            &pairs,
            &BootstrapConfig {
                resamples: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((ci.estimate, ci.ci_lower, ci.ci_upper), (0.5, 0.5, 0.5));
    }

    #[test]
    fn ci_is_seed_deterministic_and_brackets_estimate() {
        let pairs: Vec<_> = (0..10)
            .map(|i| OutcomePair::new((i + 1) as f64, i % 4 != 3, -(i as f64) + ((i * 7) % 5) as f64))
            .collect();
        let cfg = BootstrapConfig {
            resamples: 2000,
            seed: 9,
            workers: 1,
        };
        let a = bootstrap_ci(&pairs, &cfg).unwrap();
        let b = bootstrap_ci(&pairs, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_lower <= a.estimate && a.estimate <= a.ci_upper);
    }

    #[test]
    fn identical_models() {
        let pairs = fixture(25, |i| ((i * 13) % 7) as f64);
        let r = paired_compare(
            &pairs,
            &pairs,
            &BootstrapConfig {
                resamples: 300,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn planted_dominance() {
        let a: Vec<_> = (0..20)
            .map(|i| OutcomePair::new((i + 1) as f64, true, -(i as f64)))
            .collect();
        let b: Vec<_> = (0..20)
            .map(|i| OutcomePair::new((i + 1) as f64, true, i as f64))
            .collect();
        let r = paired_compare(
            &a,
            &b,
            &BootstrapConfig {
                resamples: 1000,
                seed: 3,
                workers: 2,
            },
        )
        .unwrap();
        assert_eq!(r.delta, 1.0);
        assert!(r.p < 0.01);
        let s = paired_compare(
            &b,
            &a,
            &BootstrapConfig {
                resamples: 1000,
                seed: 3,
                workers: 2,
            },
        )
        .unwrap();
        assert_eq!(s.delta, -1.0);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn swap_negates_delta_on_noisy_models() {
        let a = fixture(40, |i| ((i * 17) % 11) as f64);
        let b = fixture(40, |i| ((i * 5) % 13) as f64 - i as f64 * 0.1);
        let cfg = BootstrapConfig {
            resamples: 500,
            seed: 1,
            workers: 1,
        };
        let ab = paired_compare(&a, &b, &cfg).unwrap();
        let ba = paired_compare(&b, &a, &cfg).unwrap();
        assert_eq!(ab.delta, -ba.delta);
        assert_eq!(ab.p, ba.p);
    }

    #[test]
    fn mismatch() {
        let a = fixture(5, |i| i as f64);
        let mut b = a.clone();
        b[2].time += 1.0;
        assert!(matches!(
            paired_compare(&a, &b, &BootstrapConfig::default()),
            Err(Error::PatientMismatch(_))
        ));
        assert!(paired_compare(&a, &a[..4], &BootstrapConfig::default()).is_err());
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_adjust(&[0.3]).unwrap(), vec![0.3]);
        let q = bh_adjust(&[0.01, 0.02, 0.03, 0.04]).unwrap();
        for &v in &q {
            assert!((v - 0.04).abs() < 1e-15);
        }
        let q2 = bh_adjust(&q).unwrap();
        assert_eq!(q2, q);
        assert!(bh_adjust(&[1.5]).is_err());
        assert!(bh_adjust(&[]).unwrap().is_empty());
    }

    #[test]
    fn multiset_weights_sum_to_one() {
        for n in 1..=5 {
            let total: f64 = multisets(n).iter().map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strata_preserve_counts() {
        let events = [true, false, true, true, false];
        let s = Strata::new(&events);
        let mut rng = resample_rng(1, 0);
        for _ in 0..100 {
            let idx = s.draw(&mut rng);
            assert_eq!(idx.iter().filter(|&&i| events[i]).count(), 3);
            assert_eq!(idx.len(), 5);
        }
    }

    proptest! {
        #[test]
        fn bh_monotone_and_bounded(p in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let q = bh_adjust(&p).unwrap();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in order.windows(2) {
                prop_assert!(q[w[0]] <= q[w[1]]);
            }
            for (pi, qi) in p.iter().zip(&q) {
                prop_assert!(qi >= pi && *qi <= 1.0);
            }
            // Re-adjusting can only raise q; it is not idempotent in general.
            let qq = bh_adjust(&q).unwrap();
            for (a, b) in q.iter().zip(&qq) {
                prop_assert!(b >= a);
            }
        }
    }
}
