//! Browser bindings for the bcrisk demo page.
//!
//! Every export takes and returns a JSON string. The `*_json` functions hold
//! the logic and run natively too; the `#[wasm_bindgen]` wrappers only turn
//! errors into JavaScript exceptions.

use bcrisk::capra::{self, parse_pn, AjccEdition, ClinRecord, PtStage};
use bcrisk::survival::{nll_loss, risk_from_hazards, survival_curve, HazardVector, SurvivalLabel, NUM_BINS};
use bcrisk::tiling::{self, Mask, PlanConfig, SpacingPolicy, TissueCrop};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn parse<T: for<'de> Deserialize<'de>>(input: &str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalInput {
    /// Either hazards in [0, 1] or raw logits.
    #[serde(default)]
    pub hazards: Option<[f64; NUM_BINS]>,
    #[serde(default)]
    pub logits: Option<[f64; NUM_BINS]>,
    /// Observed bin; the loss is reported when given.
    #[serde(default)]
    pub bin: Option<usize>,
    #[serde(default)]
    pub censored: bool,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SurvivalOutput {
    pub hazards: [f64; NUM_BINS],
    pub survival: [f64; NUM_BINS],
    pub risk: f64,
    pub loss: Option<f64>,
}

pub fn survival_json(input: &str) -> Result<String, String> {
    let inp: SurvivalInput = parse(input)?;
    let h = match (inp.hazards, inp.logits) {
        (Some(h), None) => HazardVector::new(h).map_err(|e| e.to_string())?,
        (None, Some(l)) => HazardVector::from_logits(&l),
        _ => return Err("give exactly one of `hazards` or `logits`".into()),
    };
    let loss = match inp.bin {
        Some(b) => {
            let label = SurvivalLabel::new(b, inp.censored).map_err(|e| e.to_string())?;
            let alpha = inp.alpha.unwrap_or(bcrisk::survival::DEFAULT_ALPHA);
            if !(0.0..=1.0).contains(&alpha) {
                return Err(format!("alpha must be in [0, 1], got {alpha}"));
            }
            Some(nll_loss(&h, label, alpha))
        }
        None => None,
    };
    emit(&SurvivalOutput {
        hazards: *h.values(),
        survival: survival_curve(&h),
        risk: risk_from_hazards(&h).0,
        loss,
    })
}

/// Form fields of the CAPRA-S calculator. Absent fields are missing.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapraInput {
    pub psa: Option<f64>,
    pub gleason_primary: Option<u8>,
    pub gleason_secondary: Option<u8>,
    pub sm: Option<bool>,
    pub ece: Option<bool>,
    pub svi: Option<bool>,
    pub lni: Option<bool>,
    #[serde(default)]
    pub pt_stage: String,
    #[serde(default)]
    pub pn_stage: String,
    #[serde(default)]
    pub edition: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CapraOutput {
    pub points: u8,
    pub group: String,
    pub components: capra::Components,
    /// Fields filled from the stage.
    pub inferred: String,
}

pub fn capra_json(input: &str) -> Result<String, String> {
    let inp: CapraInput = parse(input)?;
    let gleason = match (inp.gleason_primary, inp.gleason_secondary) {
        (Some(p), Some(s)) => Some((p, s)),
        (None, None) => None,
        _ => return Err("give both Gleason patterns or neither".into()),
    };
    let rec = ClinRecord {
        patient_id: "demo".into(),
        psa: inp.psa,
        gleason,
        surgical_margin: inp.sm,
        ece: inp.ece,
        svi: inp.svi,
        lni: inp.lni,
        pt_stage: PtStage::parse(&inp.pt_stage).map_err(|e| e.to_string())?,
        pn_positive: parse_pn(&inp.pn_stage).map_err(|e| e.to_string())?,
        edition: inp.edition.parse::<AjccEdition>().map_err(|e| e.to_string())?,
        ..Default::default()
    };
    let scored = capra::score(&capra::infer_surrogates(&rec)).map_err(|e| e.to_string())?;
    emit(&CapraOutput {
        points: scored.points,
        group: scored.group.as_str().into(),
        components: scored.components,
        inferred: scored.inferred.names(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilePlanInput {
    /// Crop sizes in mask pixels; tissue fills the inscribed ellipse.
    pub crops: Vec<(u32, u32)>,
    /// Native spacings of the slide pyramid, in microns per pixel.
    pub spacings: Vec<f64>,
    /// Native pixels per mask pixel.
    pub mask_downsample: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DemoRegion {
    /// Region box in mask pixels.
    pub x: u32,
    pub y: u32,
    pub size: u32,
    pub coverage: f64,
    /// Row-major keep flags of the 8x8 tiles.
    pub tiles: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TilePlanOutput {
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Placed crop boxes in mask pixels, in input order.
    pub placements: Vec<tiling::Rect>,
    pub native_mpp: f64,
    pub resize_factor: f64,
    pub extraction_px: u32,
    pub regions: Vec<DemoRegion>,
    pub tile_count: usize,
}

fn ellipse(w: u32, h: u32) -> Mask {
    let (a, b) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
    Mask::from_fn(w, h, |x, y| {
        let dx = (f64::from(x) + 0.5 - a) / a;
        let dy = (f64::from(y) + 0.5 - b) / b;
        dx * dx + dy * dy <= 1.0
    })
}

pub fn tile_plan_json(input: &str) -> Result<String, String> {
    let inp: TilePlanInput = parse(input)?;
    if inp.crops.iter().any(|&(w, h)| w == 0 || h == 0) {
        return Err("crop sizes must be positive".into());
    }
    let choice =
        tiling::choose_spacing(&SpacingPolicy::default(), &inp.spacings).map_err(|e| e.to_string())?;
    let crops = inp
        .crops
        .iter()
        .enumerate()
        .map(|(i, &(w, h))| {
            TissueCrop::new(
                format!("crop{i}"),
                tiling::Rect::new(0, 0, w, h),
                choice.native_mpp,
                ellipse(w, h),
            )
        })
        .collect::<bcrisk::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let packing = tiling::pack(&crops, None).map_err(|e| e.to_string())?;
    let canvas = tiling::compose_mask(&crops, &packing).map_err(|e| e.to_string())?;
    let cfg = PlanConfig {
        mask_downsample: inp.mask_downsample,
        ..PlanConfig::default()
    };
    let plan = tiling::plan_tiles(&canvas, &choice, &cfg).map_err(|e| e.to_string())?;
    let ds = inp.mask_downsample;
    emit(&TilePlanOutput {
        canvas_width: packing.canvas_width,
        canvas_height: packing.canvas_height,
        placements: packing.placements.iter().map(|p| p.rect).collect(),
        native_mpp: choice.native_mpp,
        resize_factor: choice.resize_factor,
        extraction_px: choice.extraction_px,
        tile_count: plan.tile_count(),
        regions: plan
            .regions
            .iter()
            .map(|r| DemoRegion {
                x: r.rect.x / ds,
                y: r.rect.y / ds,
                size: r.rect.width / ds,
                coverage: r.coverage,
                tiles: r.tiles.iter().map(|t| t.kept).collect(),
            })
            .collect(),
    })
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Survival curve, risk and optional loss from four hazards or logits.
#[wasm_bindgen]
pub fn survival(input: &str) -> Result<String, JsValue> {
    js(survival_json(input))
}

/// CAPRA-S score with stage-derived surrogates.
#[wasm_bindgen]
pub fn capra(input: &str) -> Result<String, JsValue> {
    js(capra_json(input))
}

/// Packs elliptical tissue crops and lays the region/tile grid over them.
#[wasm_bindgen]
pub fn tile_plan(input: &str) -> Result<String, JsValue> {
    js(tile_plan_json(input))
}
