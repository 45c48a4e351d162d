//! CAPRA-S postoperative risk score.
//!
//! | Variable | Value        | Points |
//! |----------|--------------|--------|
//! | PSA      | 0-6 / 6.01-10 / 10.01-20 / >20 ng/mL | 0 / 1 / 2 / 3 |
//! | Gleason  | <=6 / 3+4 / 4+3 / 8-10 | 0 / 1 / 2 / 3 |
//! | Surgical margin positive | | 2 |
//! | Seminal vesicle invasion | | 2 |
//! | Extracapsular extension  | | 1 |
//! | Lymph node involvement   | | 1 |
//!
//! Missing margin, ECE, SVI and LNI flags may be inferred from the
//! pathological stage before any cohort-level imputation runs.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::quantile::median;
use crate::{Error, Result};

const PT_VOCABULARY: &[&str] = &[
    "T1", "T1a", "T1b", "T1c", "T2", "T2a", "T2b", "T2c", "T3", "T3a", "T3b", "T3c", "T4", "T4a", "T4b", "TX",
];
const PN_VOCABULARY: &[&str] = &["N0", "N1", "NX"];

/// Strips an optional `p` prefix and normalizes case: `pt3A` -> `T3a`.
fn normalize_token(raw: &str) -> String {
    let t = raw.trim();
    let t = t.strip_prefix('p').or_else(|| t.strip_prefix('P')).unwrap_or(t);
    let mut chars = t.chars();
    match chars.next() {
        Some(first) => first.to_ascii_uppercase().to_string() + &chars.as_str().to_ascii_lowercase(),
        None => String::new(),
    }
}

/// Pathological T stage, ordered by number and then sub-stage (`T3 < T3a < T3b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PtStage {
    pub number: u8,
    pub sub: Option<char>,
}

impl PtStage {
    pub const fn new(number: u8, sub: Option<char>) -> Self {
        Self { number, sub }
    }

    /// Parses a stage token. Empty tokens and `TX` mean "unknown" and give `None`.
    pub fn parse(raw: &str) -> Result<Option<Self>> {
        let tok = normalize_token(raw);
        if tok.is_empty() || tok.eq_ignore_ascii_case("TX") {
            return Ok(None);
        }
        if !PT_VOCABULARY.contains(&tok.as_str()) {
            return Err(Error::UnknownStage {
                token: raw.trim().to_string(),
                valid: PT_VOCABULARY.join(", "),
            });
        }
        let bytes = tok.as_bytes();
        let number = bytes[1] - b'0';
        let sub = bytes.get(2).map(|&b| b as char);
        Ok(Some(Self { number, sub }))
    }

    pub fn at_least(&self, other: PtStage) -> bool {
        *self >= other
    }
}

impl Ord for PtStage {
    fn cmp(&self, other: &Self) -> Ordering {
        // None sorts before any letter.
        (self.number, self.sub).cmp(&(other.number, other.sub))
    }
}

impl PartialOrd for PtStage {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for PtStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.number)?;
        if let Some(s) = self.sub {
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

/// Parses a pN token into "node positive" (`N1`), "node negative" (`N0`) or unknown.
pub fn parse_pn(raw: &str) -> Result<Option<bool>> {
    let tok = normalize_token(raw);
    match tok.as_str() {
        "" | "Nx" => Ok(None),
        "N0" => Ok(Some(false)),
        "N1" => Ok(Some(true)),
        _ => Err(Error::UnknownStage {
            token: raw.trim().to_string(),
            valid: PN_VOCABULARY.join(", "),
        }),
    }
}

/// AJCC TNM edition the pathological stage was recorded under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AjccEdition {
    Fourth,
    Fifth,
    #[default]
    Eighth,
}

impl FromStr for AjccEdition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "4" => Ok(Self::Fourth),
            "5" => Ok(Self::Fifth),
            "8" | "" => Ok(Self::Eighth),
            other => Err(Error::InvalidArgument(format!(
                "AJCC edition must be 4, 5 or 8, got `{other}`"
            ))),
        }
    }
}

impl AjccEdition {
    /// Lowest stage from which seminal vesicle invasion is assumed.
    pub fn svi_threshold(self) -> PtStage {
        match self {
            Self::Fourth => PtStage::new(3, Some('c')),
            Self::Fifth | Self::Eighth => PtStage::new(3, Some('b')),
        }
    }
}

/// Which of the six scored fields a pass touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldFlags {
    pub psa: bool,
    pub gleason: bool,
    pub sm: bool,
    pub svi: bool,
    pub ece: bool,
    pub lni: bool,
}

impl FieldFlags {
    pub fn any(&self) -> bool {
        self.psa || self.gleason || self.sm || self.svi || self.ece || self.lni
    }

    /// Names of the set flags, `;`-separated in table order.
    pub fn names(&self) -> String {
        [
            (self.psa, "psa"),
            (self.gleason, "gleason"),
            (self.sm, "sm"),
            (self.svi, "svi"),
            (self.ece, "ece"),
            (self.lni, "lni"),
        ]
        .iter()
        .filter(|(set, _)| *set)
        .map(|(_, n)| *n)
        .collect::<Vec<_>>()
        .join(";")
    }
}

/// Clinicopathological inputs of one patient; `None` means missing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClinRecord {
    pub patient_id: String,
    pub psa: Option<f64>,
    /// Primary and secondary Gleason pattern.
    pub gleason: Option<(u8, u8)>,
    pub surgical_margin: Option<bool>,
    pub ece: Option<bool>,
    pub svi: Option<bool>,
    pub lni: Option<bool>,
    pub pt_stage: Option<PtStage>,
    /// `Some(true)` for pN1.
    pub pn_positive: Option<bool>,
    pub edition: AjccEdition,
    #[serde(default)]
    pub inferred: FieldFlags,
    #[serde(default)]
    pub imputed: FieldFlags,
}

impl ClinRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(psa) = self.psa {
            if !(psa.is_finite() && psa >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{}: PSA must be a non-negative number, got {psa}",
                    self.patient_id
                )));
            }
        }
        if let Some((p, s)) = self.gleason {
            if !(1..=5).contains(&p) || !(1..=5).contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "{}: Gleason patterns must be in 1..=5, got {p}+{s}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// Fills missing margin, ECE, SVI and LNI flags from the stage. Observed
/// values are never overwritten.
///
/// - ECE for pT >= T3a
/// - SVI for pT >= T3b (AJCC 5th/8th) or >= T3c (AJCC 4th)
/// - positive margin for pT >= T3
/// - LNI from pN1
pub fn infer_surrogates(rec: &ClinRecord) -> ClinRecord {
    let mut out = rec.clone();
    if let Some(pt) = rec.pt_stage {
        if out.ece.is_none() {
            out.ece = Some(pt.at_least(PtStage::new(3, Some('a'))));
            out.inferred.ece = true;
        }
        if out.svi.is_none() {
            out.svi = Some(pt.at_least(rec.edition.svi_threshold()));
            out.inferred.svi = true;
        }
        if out.surgical_margin.is_none() {
            out.surgical_margin = Some(pt.at_least(PtStage::new(3, None)));
            out.inferred.sm = true;
        }
    }
    if out.lni.is_none() {
        if let Some(pn) = rec.pn_positive {
            out.lni = Some(pn);
            out.inferred.lni = true;
        }
    }
    out
}

pub fn psa_points(psa: f64) -> u8 {
    if psa <= 6.0 {
        0
    } else if psa <= 10.0 {
        1
    } else if psa <= 20.0 {
        2
    } else {
        3
    }
}

/// Gleason points. Totals up to 6 score 0 and totals of 8 or more score 3.
/// A total of 7 scores 1 when the primary pattern is at most 3 (3+4, 2+5)
/// and 2 otherwise (4+3, 5+2).
pub fn gleason_points(primary: u8, secondary: u8) -> u8 {
    match primary + secondary {
        0..=6 => 0,
        7 if primary <= 3 => 1,
        7 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    Intermediate,
    High,
}

impl RiskGroup {
    pub fn from_points(points: u8) -> Self {
        match points {
            0..=2 => Self::Low,
            3..=5 => Self::Intermediate,
            _ => Self::High,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Intermediate => "intermediate",
            Self::High => "high",
        }
    }
}

/// Per-component points of a scored record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub psa: u8,
    pub gleason: u8,
    pub sm: u8,
    pub svi: u8,
    pub ece: u8,
    pub lni: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapraScore {
    pub patient_id: String,
    pub components: Components,
    pub points: u8,
    pub group: RiskGroup,
    pub inferred: FieldFlags,
    pub imputed: FieldFlags,
}

/// Scores a record whose six fields are all present.
pub fn score(rec: &ClinRecord) -> Result<CapraScore> {
    rec.validate()?;
    let mut missing = vec![];
    if rec.psa.is_none() {
        missing.push("psa");
    }
    if rec.gleason.is_none() {
        missing.push("gleason");
    }
    if rec.surgical_margin.is_none() {
        missing.push("sm");
    }
    if rec.svi.is_none() {
        missing.push("svi");
    }
    if rec.ece.is_none() {
        missing.push("ece");
    }
    if rec.lni.is_none() {
        missing.push("lni");
    }
    if !missing.is_empty() {
        return Err(Error::Unscorable(format!(
            "{}: missing {}",
            rec.patient_id,
            missing.join(", ")
        )));
    }
    let (gp, gs) = rec.gleason.expect("checked");
    let flag = |v: Option<bool>, pts: u8| if v == Some(true) { pts } else { 0 };
    let components = Components {
        psa: psa_points(rec.psa.expect("checked")),
        gleason: gleason_points(gp, gs),
        sm: flag(rec.surgical_margin, 2),
        svi: flag(rec.svi, 2),
        ece: flag(rec.ece, 1),
        lni: flag(rec.lni, 1),
    };
    let points = components.psa
        + components.gleason
        + components.sm
        + components.svi
        + components.ece
        + components.lni;
    Ok(CapraScore {
        patient_id: rec.patient_id.clone(),
        components,
        points,
        group: RiskGroup::from_points(points),
        inferred: rec.inferred,
        imputed: rec.imputed,
    })
}

/// Mode of observed flags; ties resolve to `false`.
fn boolean_mode(values: impl Iterator<Item = Option<bool>>) -> Option<bool> {
    let (mut yes, mut no) = (0usize, 0usize);
    for v in values.flatten() {
        if v {
            yes += 1;
        } else {
            no += 1;
        }
    }
    (yes + no > 0).then_some(yes > no)
}

/// Gleason pair at the lower median of the severity order (total, then primary).
fn gleason_median(values: impl Iterator<Item = Option<(u8, u8)>>) -> Option<(u8, u8)> {
    let mut observed: Vec<(u8, u8)> = values.flatten().collect();
    observed.sort_by_key(|&(p, s)| (p + s, p));
    (!observed.is_empty()).then(|| observed[(observed.len() - 1) / 2])
}

/// Fills remaining gaps with cohort statistics: PSA by median, Gleason by the
/// lower median pattern pair, binary flags by mode (ties to negative).
pub fn impute_cohort(records: &[ClinRecord]) -> Result<Vec<ClinRecord>> {
    if records.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    let psa: Vec<f64> = records.iter().filter_map(|r| r.psa).collect();
    let psa_fill = median(&psa).ok_or(Error::MissingEverywhere("psa"))?;
    let gleason_fill =
        gleason_median(records.iter().map(|r| r.gleason)).ok_or(Error::MissingEverywhere("gleason"))?;
    let sm_fill =
        boolean_mode(records.iter().map(|r| r.surgical_margin)).ok_or(Error::MissingEverywhere("sm"))?;
    let svi_fill = boolean_mode(records.iter().map(|r| r.svi)).ok_or(Error::MissingEverywhere("svi"))?;
    let ece_fill = boolean_mode(records.iter().map(|r| r.ece)).ok_or(Error::MissingEverywhere("ece"))?;
    let lni_fill = boolean_mode(records.iter().map(|r| r.lni)).ok_or(Error::MissingEverywhere("lni"))?;

    Ok(records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if out.psa.is_none() {
                out.psa = Some(psa_fill);
                out.imputed.psa = true;
            }
            if out.gleason.is_none() {
                out.gleason = Some(gleason_fill);
                out.imputed.gleason = true;
            }
            if out.surgical_margin.is_none() {
                out.surgical_margin = Some(sm_fill);
                out.imputed.sm = true;
            }
            if out.svi.is_none() {
                out.svi = Some(svi_fill);
                out.imputed.svi = true;
            }
            if out.ece.is_none() {
                out.ece = Some(ece_fill);
                out.imputed.ece = true;
            }
            if out.lni.is_none() {
                out.lni = Some(lni_fill);
                out.imputed.lni = true;
            }
            out
        })
        .collect())
}

/// Surrogate inference, cohort imputation and scoring in one pass.
pub fn score_cohort(records: &[ClinRecord]) -> Result<Vec<CapraScore>> {
    for r in records {
        r.validate()?;
    }
    let inferred: Vec<ClinRecord> = records.iter().map(infer_surrogates).collect();
    impute_cohort(&inferred)?.iter().map(score).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(psa: f64, g: (u8, u8), sm: bool, svi: bool, ece: bool, lni: bool) -> ClinRecord {
        ClinRecord {
            patient_id: "p".into(),
            psa: Some(psa),
            gleason: Some(g),
            surgical_margin: Some(sm),
            svi: Some(svi),
            ece: Some(ece),
            lni: Some(lni),
            ..Default::default()
        }
    }

    fn staged(pt: &str, edition: AjccEdition) -> ClinRecord {
        ClinRecord {
            pt_stage: PtStage::parse(pt).unwrap(),
            pn_positive: Some(false),
            edition,
            ..Default::default()
        }
    }

    #[test]
    fn table_examples() {
        let s = score(&rec(5.0, (3, 3), false, false, false, false)).unwrap();
        assert_eq!((s.points, s.group), (0, RiskGroup::Low));
        let s = score(&rec(15.0, (4, 3), true, true, true, true)).unwrap();
        assert_eq!((s.points, s.group), (10, RiskGroup::High));
        let s = score(&rec(25.0, (4, 5), true, true, true, true)).unwrap();
        assert_eq!((s.points, s.group), (12, RiskGroup::High));
    }

    #[test]
    fn psa_band_edges() {
        assert_eq!(psa_points(6.0), 0);
        assert_eq!(psa_points(6.01), 1);
        assert_eq!(psa_points(10.0), 1);
        assert_eq!(psa_points(10.01), 2);
        assert_eq!(psa_points(20.0), 2);
        assert_eq!(psa_points(20.01), 3);
    }

    #[test]
    fn gleason_rows() {
        assert_eq!(gleason_points(3, 3), 0);
        assert_eq!(gleason_points(2, 4), 0);
        assert_eq!(gleason_points(3, 4), 1);
        assert_eq!(gleason_points(4, 3), 2);
        assert_eq!(gleason_points(4, 4), 3);
        assert_eq!(gleason_points(5, 5), 3);
    }

    #[test]
    fn group_thresholds() {
        for p in 0..=12u8 {
            let expected = if p <= 2 {
                RiskGroup::Low
            } else if p <= 5 {
                RiskGroup::Intermediate
            } else {
                RiskGroup::High
            };
            assert_eq!(RiskGroup::from_points(p), expected);
        }
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(PtStage::parse("pT3a").unwrap(), Some(PtStage::new(3, Some('a'))));
        assert_eq!(PtStage::parse("t2").unwrap(), Some(PtStage::new(2, None)));
        assert_eq!(
            PtStage::parse(" PT3B ").unwrap(),
            Some(PtStage::new(3, Some('b')))
        );
        assert_eq!(PtStage::parse("").unwrap(), None);
        assert_eq!(PtStage::parse("pTx").unwrap(), None);
        let err = PtStage::parse("T5").unwrap_err();
        assert!(err.to_string().contains("T3a"));
        assert_eq!(parse_pn("pN1").unwrap(), Some(true));
        assert_eq!(parse_pn("n0").unwrap(), Some(false));
        assert!(parse_pn("N3").is_err());
    }

    #[test]
    fn stage_order() {
        let p = |s| PtStage::parse(s).unwrap().unwrap();
        assert!(p("T2c") < p("T3"));
        assert!(p("T3") < p("T3a"));
        assert!(p("T3b") < p("T3c"));
        assert!(p("T3c") < p("T4"));
    }

    #[test]
    fn surrogates_t3a_eighth() {
        let mut r = staged("pT3a", AjccEdition::Eighth);
        r.pn_positive = Some(true);
        let out = infer_surrogates(&r);
        assert_eq!(out.ece, Some(true));
        assert_eq!(out.surgical_margin, Some(true));
        assert_eq!(out.svi, Some(false));
        assert_eq!(out.lni, Some(true));
        assert!(out.inferred.ece && out.inferred.lni);
    }

    #[test]
    fn surrogates_fourth_edition_needs_t3c() {
        let out = infer_surrogates(&staged("pT3b", AjccEdition::Fourth));
        assert_eq!(out.svi, Some(false));
        let out = infer_surrogates(&staged("pT3c", AjccEdition::Fourth));
        assert_eq!(out.svi, Some(true));
        let out = infer_surrogates(&staged("pT3b", AjccEdition::Fifth));
        assert_eq!(out.svi, Some(true));
    }

    #[test]
    fn explicit_flags_are_kept() {
        let mut r = rec(4.0, (3, 3), true, true, true, true);
        r.pt_stage = PtStage::parse("pT2").unwrap();
        r.pn_positive = Some(false);
        let out = infer_surrogates(&r);
        assert_eq!(out.surgical_margin, Some(true));
        assert_eq!(out.lni, Some(true));
        assert!(!out.inferred.any());
    }

    #[test]
    fn imputation_examples() {
        let mut a = rec(4.0, (3, 3), false, false, false, false);
        let mut b = a.clone();
        let c = rec(10.0, (4, 3), true, false, true, false);
        b.psa = None;
        a.patient_id = "a".into();
        let out = impute_cohort(&[a.clone(), b, c.clone()]).unwrap();
        assert_eq!(out[1].psa, Some(7.0));
        assert!(out[1].imputed.psa);

        let untouched = impute_cohort(&[a.clone(), c.clone()]).unwrap();
        assert_eq!(untouched, vec![a.clone(), c]);

        let mut only = vec![a.clone(); 4];
        for r in only.iter_mut().skip(1) {
            r.psa = None;
        }
        only[0].psa = Some(8.5);
        let out = impute_cohort(&only).unwrap();
        assert!(out.iter().all(|r| r.psa == Some(8.5)));

        let mut none = vec![a.clone(); 2];
        none.iter_mut().for_each(|r| r.svi = None);
        assert_eq!(impute_cohort(&none), Err(Error::MissingEverywhere("svi")));
    }

    #[test]
    fn mode_ties_go_negative() {
        assert_eq!(
            boolean_mode([Some(true), Some(false), None].into_iter()),
            Some(false)
        );
        assert_eq!(
            boolean_mode([Some(true), Some(true), Some(false)].into_iter()),
            Some(true)
        );
    }

    #[test]
    fn unscorable_lists_fields() {
        let mut r = rec(4.0, (3, 3), false, false, false, false);
        r.ece = None;
        r.psa = None;
        let err = score(&r).unwrap_err().to_string();
        assert!(err.contains("psa") && err.contains("ece"));
    }

    #[test]
    fn monotone_in_each_component() {
        let psas = [0.5, 6.0, 6.5, 10.0, 12.0, 20.0, 40.0];
        let gleasons = [(3, 3), (3, 4), (4, 3), (4, 4), (5, 5)];
        for (i, &psa) in psas.iter().enumerate() {
            for (j, &g) in gleasons.iter().enumerate() {
                for flags in 0..16u8 {
                    let b = |k: u8| flags & (1 << k) != 0;
                    let base = score(&rec(psa, g, b(0), b(1), b(2), b(3))).unwrap().points;
                    if let Some(&p2) = psas.get(i + 1) {
                        assert!(score(&rec(p2, g, b(0), b(1), b(2), b(3))).unwrap().points >= base);
                    }
                    if let Some(&g2) = gleasons.get(j + 1) {
                        assert!(score(&rec(psa, g2, b(0), b(1), b(2), b(3))).unwrap().points >= base);
                    }
                    for k in 0..4 {
                        let up = flags | (1 << k);
                        let c = |m: u8| up & (1 << m) != 0;
                        assert!(score(&rec(psa, g, c(0), c(1), c(2), c(3))).unwrap().points >= base);
                    }
                    assert!(base <= 12);
                }
            }
        }
    }
}
