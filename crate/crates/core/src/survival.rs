//! Discrete-time survival over four time bins.
//!
//! Time is cut into four half-open intervals at the quartiles of observed
//! event times. A model emits one hazard per bin, the conditional probability
//! of the event in that bin given survival up to it. The survival curve is
//! the running product of `1 - h`, and training uses the censoring-aware
//! negative log-likelihood with an extra weight `alpha` on uncensored terms.

use serde::{Deserialize, Serialize};

use crate::quantile::quantile_sorted;
use crate::{Error, Result};

/// Number of discrete time bins.
pub const NUM_BINS: usize = 4;

/// Hazards are clamped to `[HAZARD_EPS, 1 - HAZARD_EPS]` before taking logs.
pub const HAZARD_EPS: f64 = 1e-7;

/// Default up-weighting of uncensored likelihood terms.
pub const DEFAULT_ALPHA: f64 = 0.25;

/// Edges `t0 < t1 < t2 < t3 < t4` of the four bins, in months.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBins {
    edges: [f64; NUM_BINS + 1],
}

impl TimeBins {
    /// Builds bins from explicit edges, which must be finite and strictly increasing.
    pub fn from_edges(edges: [f64; NUM_BINS + 1]) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "bin edges must be finite and strictly increasing, got {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64; NUM_BINS + 1] {
        &self.edges
    }

    /// Bin index of a time. Times at or beyond the last edge fall into the
    /// last bin, times before the first edge into bin 0.
    pub fn bin_of(&self, time: f64) -> usize {
        // Interior edges t1..t3 decide membership; [t_b, t_{b+1}) is half-open.
        self.edges[1..NUM_BINS]
            .iter()
            .take_while(|&&edge| time >= edge)
            .count()
    }

    pub fn label(&self, time: f64, event: bool) -> SurvivalLabel {
        SurvivalLabel {
            bin: self.bin_of(time),
            censored: !event,
        }
    }
}

/// Builds bins from the times of uncensored patients.
///
/// Interior edges are the 25th, 50th and 75th percentiles (linear
/// interpolation). The outer edges are 0 and one month past the last event.
pub fn make_bins(event_times: &[f64]) -> Result<TimeBins> {
    if let Some(bad) = event_times.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "event times must be finite and non-negative, got {bad}"
        )));
    }
    let mut sorted = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < NUM_BINS {
        return Err(Error::DegenerateBins {
            distinct: distinct.len(),
        });
    }
    let q = |p: f64| quantile_sorted(&sorted, p).expect("non-empty");
    let last = *sorted.last().expect("non-empty");
    let edges = [0.0, q(0.25), q(0.5), q(0.75), last + 1.0];
    TimeBins::from_edges(edges).map_err(|_| Error::DegenerateBins {
        distinct: distinct.len(),
    })
}

/// Discrete outcome of one patient: the bin of the event or of censoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub bin: usize,
    pub censored: bool,
}

impl SurvivalLabel {
    pub fn new(bin: usize, censored: bool) -> Result<Self> {
        if bin >= NUM_BINS {
            return Err(Error::InvalidArgument(format!(
                "bin {bin} out of range 0..{NUM_BINS}"
            )));
        }
        Ok(Self { bin, censored })
    }

    pub fn event(bin: usize) -> Result<Self> {
        Self::new(bin, false)
    }

    pub fn censored_at(bin: usize) -> Result<Self> {
        Self::new(bin, true)
    }
}

/// Per-bin hazards of one patient.
///
/// Models produce these through a sigmoid, so values are strictly inside
/// `(0, 1)` up to floating-point saturation; the closed interval is accepted
/// so that limiting cases can be evaluated directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardVector([f64; NUM_BINS]);

impl HazardVector {
    pub fn new(hazards: [f64; NUM_BINS]) -> Result<Self> {
        if hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::InvalidArgument(format!(
                "hazards must lie in [0, 1], got {hazards:?}"
            )));
        }
        Ok(Self(hazards))
    }

    pub fn from_logits(logits: &[f64; NUM_BINS]) -> Self {
        Self(logits.map(sigmoid))
    }

    pub fn values(&self) -> &[f64; NUM_BINS] {
        &self.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `S(b) = prod_{u <= b} (1 - h_u)` for `b = 0..4`.
pub fn survival_curve(h: &HazardVector) -> [f64; NUM_BINS] {
    let mut out = [0.0; NUM_BINS];
    let mut s = 1.0;
    for (o, &hb) in out.iter_mut().zip(h.values()) {
        s *= 1.0 - hb;
        *o = s;
    }
    out
}

fn clamp_hazard(h: f64) -> f64 {
    h.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS)
}

/// `-log S(b)` from clamped hazards; `b = -1` gives 0 (`S(-1) = 1`).
fn neg_log_survival(h: &HazardVector, through: isize) -> f64 {
    (0..=through)
        .map(|u| -(1.0 - clamp_hazard(h.0[u as usize])).ln())
        .sum()
}

/// The weighted survival loss `(1 - alpha) * L + alpha * L_uncensored`.
///
/// `L` holds the censored survival term plus the two event terms
/// (survival through the previous bin and the hazard of the event bin);
/// `L_uncensored` repeats only the event terms.
pub fn nll_loss(h: &HazardVector, label: SurvivalLabel, alpha: f64) -> f64 {
    let y = label.bin as isize;
    let c = if label.censored { 1.0 } else { 0.0 };
    let censored_term = c * neg_log_survival(h, y);
    let event_terms = (1.0 - c) * (neg_log_survival(h, y - 1) - clamp_hazard(h.0[label.bin]).ln());
    let full = censored_term + event_terms;
    (1.0 - alpha) * full + alpha * event_terms
}

/// Gradient of [`nll_loss`] with respect to the hazard logits.
///
/// `h` must be the sigmoid of those logits. Where the clamp is active the
/// derivative is zero.
pub fn nll_gradient(h: &HazardVector, label: SurvivalLabel, alpha: f64) -> [f64; NUM_BINS] {
    let mut grad = [0.0; NUM_BINS];
    let y = label.bin;
    // d h / d z for an unclamped sigmoid output.
    let dh = |u: usize| {
        let hu = h.0[u];
        if hu > HAZARD_EPS && hu < 1.0 - HAZARD_EPS {
            hu * (1.0 - hu)
        } else {
            0.0
        }
    };
    // d(-log(1 - h_u))/dz_u
    let surv_term = |u: usize| dh(u) / (1.0 - clamp_hazard(h.0[u]));
    if label.censored {
        // Only the censored survival term, weighted by (1 - alpha).
        for (u, g) in grad.iter_mut().enumerate().take(y + 1) {
            *g = (1.0 - alpha) * surv_term(u);
        }
    } else {
        // Event terms carry weight (1 - alpha) + alpha = 1.
        for (u, g) in grad.iter_mut().enumerate().take(y) {
            *g = surv_term(u);
        }
        grad[y] = -dh(y) / clamp_hazard(h.0[y]);
    }
    grad
}

/// Scalar risk derived from hazards: higher means earlier expected recurrence.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RiskScore(pub f64);

/// `r = -sum_b S(b)`, the negated expected number of event-free bins.
pub fn risk_from_hazards(h: &HazardVector) -> RiskScore {
    RiskScore(-survival_curve(h).iter().sum::<f64>())
}

/// Mean of per-fold risk scores.
pub fn ensemble_risk(per_fold: &[RiskScore]) -> Result<RiskScore> {
    if per_fold.is_empty() {
        return Err(Error::Empty("per-fold risk scores"));
    }
    let sum: f64 = per_fold.iter().map(|r| r.0).sum();
    Ok(RiskScore(sum / per_fold.len() as f64))
}
