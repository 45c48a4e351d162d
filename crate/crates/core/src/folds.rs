//! Multi-label iterative stratification into k folds.
//!
//! Each patient carries one value per label dimension (recurrence status,
//! ISUP grade, surgery era). Every distinct `(dimension, value)` pair is
//! treated as a binary label, and patients are dealt out greedily: take the
//! label with the fewest unassigned patients, and send each of its patients
//! to the fold that still wants the most of that label, breaking ties by the
//! fold's remaining capacity and then by a seeded draw.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// First surgery year counted as "after" the guideline change.
pub const ERA_BOUNDARY_YEAR: i32 = 2005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumLabels {
    pub recurrence: bool,
    /// ISUP grade group, 1..=5.
    pub isup: u8,
    /// Surgery in or after [`ERA_BOUNDARY_YEAR`].
    pub after_era: bool,
}

impl StratumLabels {
    pub fn new(recurrence: bool, isup: u8, surgery_year: i32) -> Result<Self> {
        if !(1..=5).contains(&isup) {
            return Err(Error::InvalidArgument(format!(
                "ISUP grade must be in 1..=5, got {isup}"
            )));
        }
        Ok(Self {
            recurrence,
            isup,
            after_era: surgery_year >= ERA_BOUNDARY_YEAR,
        })
    }

    /// The active `(dimension, value)` labels of this patient.
    pub fn label_values(&self) -> [LabelValue; 3] {
        [
            LabelValue::Recurrence(self.recurrence),
            LabelValue::Isup(self.isup),
            LabelValue::AfterEra(self.after_era),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelValue {
    Recurrence(bool),
    Isup(u8),
    AfterEra(bool),
}

/// Fold index per patient, with per-fold label tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
    pub fold_sizes: Vec<usize>,
    pub label_counts: BTreeMap<LabelValue, Vec<usize>>,
}

impl FoldAssignment {
    /// Patient indices in fold `f`.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }
}

/// Generic iterative stratification over patients given as lists of active
/// label ids.
pub fn iterative_stratification<L>(labels: &[Vec<L>], k: usize, seed: u64) -> Result<Vec<usize>>
where
    L: Ord + Copy,
{
    let n = labels.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} patients into {k} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Dense ids for label values, in sorted order for determinism.
    let mut ids: BTreeMap<L, usize> = BTreeMap::new();
    for l in labels.iter().flatten() {
        let next = ids.len();
        ids.entry(*l).or_insert(next);
    }
    let order: Vec<L> = ids.keys().copied().collect();
    let ids: BTreeMap<L, usize> = order.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let patient_labels: Vec<Vec<usize>> = labels
        .iter()
        .map(|ls| {
            let mut v: Vec<usize> = ls.iter().map(|l| ids[l]).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let num_labels = order.len();

    let share = 1.0 / k as f64;
    let mut capacity = vec![n as f64 * share; k];
    let mut totals = vec![0usize; num_labels];
    for ls in &patient_labels {
        for &l in ls {
            totals[l] += 1;
        }
    }
    let mut demand: Vec<Vec<f64>> = (0..k)
        .map(|_| totals.iter().map(|&t| t as f64 * share).collect())
        .collect();

    let mut unassigned: Vec<usize> = (0..n).collect();
    unassigned.shuffle(&mut rng);
    let mut remaining = totals.clone();
    let mut fold_of = vec![usize::MAX; n];

    // Patients without any label are dealt by capacity alone at the end.
    while unassigned.iter().any(|&i| !patient_labels[i].is_empty()) {
        let label = (0..num_labels)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| remaining[l])
            .expect("some label remains");
        let batch: Vec<usize> = unassigned
            .iter()
            .copied()
            .filter(|&i| patient_labels[i].contains(&label))
            .collect();
        for i in batch {
            let f = pick_fold(&demand, &capacity, Some((label, &patient_labels[i])), &mut rng);
            fold_of[i] = f;
            capacity[f] -= 1.0;
            for &l in &patient_labels[i] {
                demand[f][l] -= 1.0;
                remaining[l] -= 1;
            }
        }
        unassigned.retain(|&i| fold_of[i] == usize::MAX);
    }
    for i in unassigned {
        let f = pick_fold(&demand, &capacity, None, &mut rng);
        fold_of[i] = f;
        capacity[f] -= 1.0;
    }
    Ok(fold_of)
}

/// Fold with the largest demand for `label`; ties go to the largest summed
/// demand over all of the patient's labels, then to the largest capacity,
/// then at random.
fn pick_fold<R: Rng>(
    demand: &[Vec<f64>],
    capacity: &[f64],
    label: Option<(usize, &[usize])>,
    rng: &mut R,
) -> usize {
    let key = |f: usize| match label {
        Some((l, all)) => (
            demand[f][l],
            all.iter().map(|&m| demand[f][m]).sum::<f64>(),
            capacity[f],
        ),
        None => (0.0, 0.0, capacity[f]),
    };
    let best = (0..capacity.len()).map(key).fold(
        (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |acc, k| {
            if k.partial_cmp(&acc) == Some(std::cmp::Ordering::Greater) {
                k
            } else {
                acc
            }
        },
    );
    let ties: Vec<usize> = (0..capacity.len()).filter(|&f| key(f) == best).collect();
    ties[rng.random_range(0..ties.len())]
}

/// Stratified k-fold split over recurrence status, ISUP grade and era.
pub fn stratified_kfold(labels: &[StratumLabels], k: usize, seed: u64) -> Result<FoldAssignment> {
    let as_lists: Vec<Vec<LabelValue>> = labels.iter().map(|l| l.label_values().to_vec()).collect();
    let folds = iterative_stratification(&as_lists, k, seed)?;
    let mut fold_sizes = vec![0; k];
    let mut label_counts: BTreeMap<LabelValue, Vec<usize>> = BTreeMap::new();
    for (i, &f) in folds.iter().enumerate() {
        fold_sizes[f] += 1;
        for v in labels[i].label_values() {
            label_counts.entry(v).or_insert_with(|| vec![0; k])[f] += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        folds,
        fold_sizes,
        label_counts,
    })
}
