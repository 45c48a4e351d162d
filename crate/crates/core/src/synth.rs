//! Seeded synthetic data with planted signal.
//!
//! Nothing here resembles real patients; the generators exist so that every
//! model in the crate can be checked against a signal of known strength.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::capra::{self, AjccEdition, ClinRecord, PtStage};
use crate::cox::CoxData;
use crate::mil::{FeatureBag, LabelledBag, TILES_PER_REGION};
use crate::survival::{make_bins, TimeBins};
use crate::Result;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedBagConfig {
    pub patients: usize,
    pub dim: usize,
    pub max_regions: usize,
    /// Added to feature 0 of marker tiles.
    pub signal: f64,
    /// Standard deviation of the background noise on every feature.
    pub noise: f64,
    /// Share of patients censored before their event.
    pub censoring: f64,
}

impl Default for PlantedBagConfig {
    fn default() -> Self {
        Self {
            patients: 200,
            dim: 16,
            max_regions: 3,
            signal: 2.0,
            noise: 0.1,
            censoring: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBags {
    pub bags: Vec<FeatureBag>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// Latent risk in [0, 1]; event times fall as it rises.
    pub latent: Vec<f64>,
    pub bins: TimeBins,
}

impl PlantedBags {
    pub fn labelled(&self) -> Vec<LabelledBag> {
        self.bags
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), self.bins.label(self.times[i], self.events[i])))
            .collect()
    }
}

fn planted_bag<R: Rng>(
    z: f64,
    cfg: &PlantedBagConfig,
    noise: &Normal<f64>,
    rng: &mut R,
) -> Result<FeatureBag> {
    let regions = rng.random_range(1..=cfg.max_regions.max(1));
    let marked = (z.clamp(0.0, 1.0) * TILES_PER_REGION as f64).round() as usize;
    let mut data = Vec::with_capacity(regions);
    for _ in 0..regions {
        let mut r: Vec<f64> = (0..TILES_PER_REGION * cfg.dim)
            .map(|_| noise.sample(rng))
            .collect();
        for t in 0..marked {
            r[t * cfg.dim] += cfg.signal;
        }
        data.push(r);
    }
    FeatureBag::new(cfg.dim, data)
}

/// Bags whose share of marker tiles equals the patient's latent risk.
///
/// Event time is `120 exp(-4 z)` months for latent risk `z`; censored
/// patients are observed for a uniform fraction of that time.
pub fn planted_bags(cfg: &PlantedBagConfig, seed: u64) -> Result<PlantedBags> {
    let mut rng = rng_for(seed, 0);
    let noise =
        Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let (mut bags, mut times, mut events, mut latent) = (vec![], vec![], vec![], vec![]);
    for _ in 0..cfg.patients {
        let z: f64 = rng.random();
        bags.push(planted_bag(z, cfg, &noise, &mut rng)?);
        let t_event = 120.0 * (-4.0 * z).exp();
        if rng.random_bool(cfg.censoring.clamp(0.0, 1.0)) {
            times.push(t_event * rng.random_range(0.2..1.0));
            events.push(false);
        } else {
            times.push(t_event);
            events.push(true);
        }
        latent.push(z);
    }
    let event_times: Vec<f64> = times
        .iter()
        .zip(&events)
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .collect();
    let bins = make_bins(&event_times)?;
    Ok(PlantedBags {
        bags,
        times,
        events,
        latent,
        bins,
    })
}

/// Exponential proportional-hazards sample with standard normal covariates
/// and independent exponential censoring at `censoring_rate`.
pub fn exponential_cox_sample(n: usize, beta: &[f64], censoring_rate: f64, seed: u64) -> Result<CoxData> {
    let mut rng = rng_for(seed, 1);
    let std = Normal::new(0.0, 1.0).expect("valid");
    let (mut times, mut events, mut rows) = (vec![], vec![], vec![]);
    for _ in 0..n {
        let x: Vec<f64> = beta.iter().map(|_| std.sample(&mut rng)).collect();
        let lp: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
        let t = Exp::new(lp.exp()).expect("positive rate").sample(&mut rng);
        let c = if censoring_rate > 0.0 {
            Exp::new(censoring_rate).expect("positive rate").sample(&mut rng)
        } else {
            f64::INFINITY
        };
        times.push(t.min(c).max(f64::MIN_POSITIVE));
        events.push(t <= c);
        rows.push(x);
    }
    let names = (0..beta.len()).map(|j| format!("x{j}")).collect();
    CoxData::new(times, events, rows, names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub patients: usize,
    /// Log hazard ratio per CAPRA-S point.
    pub capra_log_hr: f64,
    /// Log hazard ratio per unit of the image latent.
    pub image_log_hr: f64,
    /// Noise added to the image latent to form the DLRS.
    pub dlrs_noise: f64,
    /// Monthly baseline hazard at average covariates.
    pub baseline_hazard: f64,
    pub max_follow_up: f64,
    /// Chance that each CAPRA field is blanked out.
    pub missing_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            patients: 500,
            capra_log_hr: 0.35,
            image_log_hr: 0.8,
            dlrs_noise: 0.5,
            baseline_hazard: 0.01,
            max_follow_up: 180.0,
            missing_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPatient {
    pub record: ClinRecord,
    pub time_months: f64,
    pub event: bool,
    pub isup: u8,
    pub surgery_year: i32,
    /// Unobserved image-derived risk factor.
    pub image_latent: f64,
    /// Noisy observation of the image latent, standing in for a model score.
    pub dlrs: f64,
    /// CAPRA-S points of the complete record before any blanking.
    pub true_capra: u8,
}

const GLEASON_MIX: [((u8, u8), f64); 6] = [
    ((3, 3), 0.35),
    ((3, 4), 0.30),
    ((4, 3), 0.15),
    ((4, 4), 0.08),
    ((4, 5), 0.07),
    ((5, 4), 0.05),
];

const STAGE_MIX: [(PtStage, f64); 4] = [
    (PtStage::new(2, None), 0.60),
    (PtStage::new(3, Some('a')), 0.25),
    (PtStage::new(3, Some('b')), 0.12),
    (PtStage::new(4, None), 0.03),
];

fn pick<T: Copy, R: Rng>(mix: &[(T, f64)], rng: &mut R) -> T {
    let mut u: f64 = rng.random();
    for &(v, p) in mix {
        if u < p {
            return v;
        }
        u -= p;
    }
    mix[mix.len() - 1].0
}

pub fn isup_grade(primary: u8, secondary: u8) -> u8 {
    match (primary + secondary, primary) {
        (..=6, _) => 1,
        (7, ..=3) => 2,
        (7, _) => 3,
        (8, _) => 4,
        _ => 5,
    }
}

/// Patients whose hazard depends on both their CAPRA-S score and an
/// independent image latent.
pub fn synthetic_cohort(cfg: &CohortConfig, seed: u64) -> Result<Vec<SyntheticPatient>> {
    let mut rng = rng_for(seed, 2);
    let psa_dist = LogNormal::new(7f64.ln(), 0.7).expect("valid");
    let std = Normal::new(0.0, 1.0).expect("valid");
    let mut out = Vec::with_capacity(cfg.patients);
    for i in 0..cfg.patients {
        let stage = pick(&STAGE_MIX, &mut rng);
        let t3 = stage.number >= 3;
        let (p, s) = pick(&GLEASON_MIX, &mut rng);
        let rec = ClinRecord {
            patient_id: format!("P{:04}", i + 1),
            psa: Some((psa_dist.sample(&mut rng) * 10.0).round() / 10.0),
            gleason: Some((p, s)),
            surgical_margin: Some(rng.random_bool(if t3 { 0.4 } else { 0.15 })),
            ece: Some(stage.at_least(PtStage::new(3, Some('a')))),
            svi: Some(stage.at_least(PtStage::new(3, Some('b')))),
            lni: Some(rng.random_bool(if t3 { 0.08 } else { 0.01 })),
            pt_stage: Some(stage),
            pn_positive: None,
            edition: AjccEdition::Eighth,
            ..Default::default()
        };
        let mut rec = rec;
        rec.pn_positive = rec.lni;
        let points = capra::score(&rec)?.points;
        let latent = std.sample(&mut rng);
        let lp = cfg.capra_log_hr * (f64::from(points) - 3.0) + cfg.image_log_hr * latent;
        let t = Exp::new(cfg.baseline_hazard * lp.exp())
            .expect("positive rate")
            .sample(&mut rng);
        let c = rng.random_range(0.25 * cfg.max_follow_up..cfg.max_follow_up);
        let time = (t.min(c) * 100.0).round().max(1.0) / 100.0;
        let dlrs = latent + cfg.dlrs_noise * std.sample(&mut rng);

        if cfg.missing_rate > 0.0 {
            let blank = |r: &mut ChaCha8Rng| r.random_bool(cfg.missing_rate);
            if blank(&mut rng) {
                rec.psa = None;
            }
            if blank(&mut rng) {
                rec.gleason = None;
            }
            if blank(&mut rng) {
                rec.surgical_margin = None;
            }
            if blank(&mut rng) {
                rec.ece = None;
            }
            if blank(&mut rng) {
                rec.svi = None;
            }
            if blank(&mut rng) {
                rec.lni = None;
            }
        }
        out.push(SyntheticPatient {
            record: rec,
            time_months: time,
            event: t <= c,
            isup: isup_grade(p, s),
            surgery_year: rng.random_range(1995..=2015),
            image_latent: latent,
            dlrs,
            true_capra: points,
        });
    }
    Ok(out)
}

/// One planted bag per cohort patient, with the marker share set to the
/// logistic of the patient's image latent. `cfg.patients` and
/// `cfg.censoring` are ignored.
pub fn cohort_bags(
    patients: &[SyntheticPatient],
    cfg: &PlantedBagConfig,
    seed: u64,
) -> Result<Vec<FeatureBag>> {
    let mut rng = rng_for(seed, 3);
    let noise =
        Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    patients
        .iter()
        .map(|p| planted_bag(1.0 / (1.0 + (-p.image_latent).exp()), cfg, &noise, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concordance::cindex_slices;

    #[test]
    fn planted_bags_deterministic() {
        let cfg = PlantedBagConfig {
            patients: 20,
            dim: 4,
            ..Default::default()
        };
        let a = planted_bags(&cfg, 3).unwrap();
        let b = planted_bags(&cfg, 3).unwrap();
        assert_eq!(a.bags, b.bags);
        assert_eq!(a.times, b.times);
        assert!(a.times.iter().all(|t| *t > 0.0));
        assert_eq!(a.labelled().len(), 20);
    }

    #[test]
    fn latent_orders_event_times() {
        let d = planted_bags(&PlantedBagConfig::default(), 1).unwrap();
        let c = cindex_slices(&d.times, &d.events, &d.latent).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn cohort_signals() {
        let pts = synthetic_cohort(&CohortConfig::default(), 5).unwrap();
        let times: Vec<f64> = pts.iter().map(|p| p.time_months).collect();
        let events: Vec<bool> = pts.iter().map(|p| p.event).collect();
        let capra: Vec<f64> = pts.iter().map(|p| f64::from(p.true_capra)).collect();
        let dlrs: Vec<f64> = pts.iter().map(|p| p.dlrs).collect();
        assert!(cindex_slices(&times, &events, &capra).unwrap() > 0.6);
        assert!(cindex_slices(&times, &events, &dlrs).unwrap() > 0.6);
        assert!(events.iter().filter(|e| **e).count() > 50);
    }

    #[test]
    fn isup_mapping() {
        assert_eq!(isup_grade(3, 3), 1);
        assert_eq!(isup_grade(3, 4), 2);
        assert_eq!(isup_grade(4, 3), 3);
        assert_eq!(isup_grade(4, 4), 4);
        assert_eq!(isup_grade(5, 4), 5);
    }
}
