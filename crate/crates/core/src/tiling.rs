//! Patient-level slide geometry.
//!
//! Tissue crops from all of a patient's slides are shelf-packed onto one
//! canvas. A grid of square regions anchored at the canvas origin is laid over
//! it; regions with enough tissue are kept and each is unrolled into an 8x8
//! grid of tiles. Region size is fixed at 2048 px at the target spacing, so
//! when only finer native levels exist a proportionally larger box is read and
//! resized down.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TARGET_MPP: f64 = 0.50;
pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const REGION_PX: u32 = 2048;
pub const TILE_PX: u32 = 256;
pub const TILES_PER_SIDE: u32 = REGION_PX / TILE_PX;
pub const DEFAULT_REGION_MIN_COVERAGE: f64 = 0.01;
/// Tile-level threshold used when tiles feed encoder pretraining.
pub const PRETRAINING_TILE_MIN_COVERAGE: f64 = 0.25;
/// Default shelf width is this factor times the square root of total crop area.
pub const SHELF_WIDTH_FACTOR: f64 = 1.2;

/// Spacing comparisons allow this much floating-point slack.
const SPACING_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

/// Binary tissue raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} pixels, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    /// Tissue pixels inside `r`, which must lie within the mask.
    pub fn count_in(&self, r: &Rect) -> u64 {
        let w = self.width as usize;
        (r.y..r.y + r.height)
            .map(|y| {
                let row = y as usize * w;
                self.data[row + r.x as usize..row + (r.x + r.width) as usize]
                    .iter()
                    .filter(|&&b| b)
                    .count() as u64
            })
            .sum()
    }
}

/// A tissue crop from one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueCrop {
    pub slide_id: String,
    /// Bounding box on the source slide, in mask pixels.
    pub bbox: Rect,
    pub spacing_mpp: f64,
    /// Crop-local mask with the bbox's dimensions.
    pub mask: Mask,
}

impl TissueCrop {
    pub fn new(slide_id: impl Into<String>, bbox: Rect, spacing_mpp: f64, mask: Mask) -> Result<Self> {
        if mask.width() != bbox.width || mask.height() != bbox.height {
            return Err(Error::Shape(format!(
                "crop mask is {}x{}, bbox is {}x{}",
                mask.width(),
                mask.height(),
                bbox.width,
                bbox.height
            )));
        }
        if !(spacing_mpp > 0.0 && spacing_mpp.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing_mpp}"
            )));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            bbox,
            spacing_mpp,
            mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// Index into the packed crop list.
    pub crop: usize,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packing {
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// In input order.
    pub placements: Vec<Placement>,
}

/// Default shelf width: `ceil(1.2 * sqrt(total area))`, never narrower than the widest crop.
pub fn default_shelf_width(sizes: &[(u32, u32)]) -> u32 {
    let area: f64 = sizes.iter().map(|&(w, h)| f64::from(w) * f64::from(h)).sum();
    let widest = sizes.iter().map(|s| s.0).max().unwrap_or(0);
    ((SHELF_WIDTH_FACTOR * area.sqrt()).ceil() as u32).max(widest)
}

/// Shelf packing of `(width, height)` boxes.
///
/// Boxes go in order of decreasing height (input order on ties), left to
/// right; a new shelf opens when the next box would exceed `max_width`.
pub fn pack_sizes(sizes: &[(u32, u32)], max_width: Option<u32>) -> Result<Packing> {
    if sizes.is_empty() {
        return Err(Error::Empty("crops to pack"));
    }
    let widest = sizes.iter().map(|s| s.0).max().unwrap_or(0);
    let max_width = max_width
        .unwrap_or_else(|| default_shelf_width(sizes))
        .max(widest);

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.cmp(&sizes[a].1));

    let mut placements = vec![None; sizes.len()];
    let (mut x, mut y, mut shelf_h, mut canvas_w) = (0u32, 0u32, 0u32, 0u32);
    for i in order {
        let (w, h) = sizes[i];
        if x > 0 && x + w > max_width {
            y += shelf_h;
            x = 0;
            shelf_h = 0;
        }
        if x == 0 {
            shelf_h = h;
        }
        placements[i] = Some(Placement {
            crop: i,
            rect: Rect::new(x, y, w, h),
        });
        x += w;
        canvas_w = canvas_w.max(x);
    }
    Ok(Packing {
        canvas_width: canvas_w,
        canvas_height: y + shelf_h,
        placements: placements.into_iter().map(|p| p.expect("placed")).collect(),
    })
}

pub fn pack(crops: &[TissueCrop], max_width: Option<u32>) -> Result<Packing> {
    let sizes: Vec<(u32, u32)> = crops.iter().map(|c| (c.bbox.width, c.bbox.height)).collect();
    pack_sizes(&sizes, max_width)
}

/// Pastes every crop's mask at its placement on an empty canvas.
pub fn compose_mask(crops: &[TissueCrop], packing: &Packing) -> Result<Mask> {
    if crops.len() != packing.placements.len() {
        return Err(Error::Shape(format!(
            "{} crops but {} placements",
            crops.len(),
            packing.placements.len()
        )));
    }
    let mut canvas = Mask::filled(packing.canvas_width, packing.canvas_height, false);
    for p in &packing.placements {
        let m = &crops[p.crop].mask;
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    canvas.set(p.rect.x + x, p.rect.y + y, true);
                }
            }
        }
    }
    Ok(canvas)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpacingPolicy {
    pub target_mpp: f64,
    /// Relative tolerance around the target.
    pub tolerance: f64,
}

impl Default for SpacingPolicy {
    fn default() -> Self {
        Self {
            target_mpp: TARGET_MPP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl SpacingPolicy {
    pub fn accepted_range(&self) -> (f64, f64) {
        (
            self.target_mpp * (1.0 - self.tolerance),
            self.target_mpp * (1.0 + self.tolerance),
        )
    }
}

/// How regions are read from the slide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacingChoice {
    pub native_mpp: f64,
    /// Output size over extracted size; 1.0 when read as is.
    pub resize_factor: f64,
    /// Region side length read at the native level.
    pub extraction_px: u32,
}

impl SpacingChoice {
    /// Spacing of the region after resizing.
    pub fn effective_mpp(&self) -> f64 {
        self.native_mpp / self.resize_factor
    }
}

/// Picks the native level to read regions from.
///
/// A level within tolerance of the target is read directly (the closest one
/// wins). Otherwise the finer level nearest to the target is read with a
/// larger box and resized by `native / target`.
pub fn choose_spacing(policy: &SpacingPolicy, spacings: &[f64]) -> Result<SpacingChoice> {
    if spacings.is_empty() {
        return Err(Error::Empty("native spacings"));
    }
    if let Some(bad) = spacings.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidArgument(format!("invalid native spacing {bad}")));
    }
    if policy.tolerance < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
    }
    let (lo, hi) = policy.accepted_range();
    let target = policy.target_mpp;
    let in_range = spacings
        .iter()
        .copied()
        .filter(|&s| s >= lo - SPACING_EPS && s <= hi + SPACING_EPS)
        .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()));
    if let Some(s) = in_range {
        return Ok(SpacingChoice {
            native_mpp: s,
            resize_factor: 1.0,
            extraction_px: REGION_PX,
        });
    }
    let finer = spacings
        .iter()
        .copied()
        .filter(|&s| s < lo)
        .max_by(f64::total_cmp)
        .ok_or_else(|| Error::NoValidSpacing {
            max_mpp: hi,
            available: spacings.to_vec(),
        })?;
    Ok(SpacingChoice {
        native_mpp: finer,
        resize_factor: finer / target,
        extraction_px: (f64::from(REGION_PX) * target / finer).round() as u32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub region_min_coverage: f64,
    /// Set for pretraining-style tile filtering.
    pub tile_min_coverage: Option<f64>,
    /// Native-level pixels per mask pixel.
    pub mask_downsample: u32,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            region_min_coverage: DEFAULT_REGION_MIN_COVERAGE,
            tile_min_coverage: None,
            mask_downsample: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSlot {
    /// Row-major index within the region, 0..64.
    pub index: u32,
    /// Native-level box.
    pub rect: Rect,
    pub coverage: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub row: u32,
    pub col: u32,
    /// Native-level extraction box.
    pub rect: Rect,
    pub resize_factor: f64,
    pub coverage: f64,
    pub tiles: Vec<TileSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Canvas size at the native level.
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub spacing: SpacingChoice,
    pub grid_rows: u32,
    pub grid_cols: u32,
    /// Kept regions, row-major.
    pub regions: Vec<RegionPlan>,
}

impl TilePlan {
    pub fn tile_count(&self) -> usize {
        self.regions.iter().map(|r| r.tiles.len()).sum()
    }

    pub fn kept_tile_count(&self) -> usize {
        self.regions
            .iter()
            .flat_map(|r| &r.tiles)
            .filter(|t| t.kept)
            .count()
    }
}

/// Lays the region grid over a canvas mask and filters by tissue coverage.
///
/// Partial regions at the right and bottom borders are dropped.
pub fn plan_tiles(mask: &Mask, spacing: &SpacingChoice, cfg: &PlanConfig) -> Result<TilePlan> {
    let ds = cfg.mask_downsample;
    if ds == 0 {
        return Err(Error::InvalidArgument("mask downsample must be >= 1".into()));
    }
    let region_native = spacing.extraction_px;
    if !region_native.is_multiple_of(ds * TILES_PER_SIDE) {
        return Err(Error::InvalidArgument(format!(
            "region of {region_native} px does not split into {TILES_PER_SIDE}x{TILES_PER_SIDE} tiles at downsample {ds}"
        )));
    }
    let region_mask = region_native / ds;
    let tile_mask = region_mask / TILES_PER_SIDE;
    let tile_native = region_native / TILES_PER_SIDE;
    let rows = mask.height() / region_mask;
    let cols = mask.width() / region_mask;
    let tile_area = f64::from(tile_mask) * f64::from(tile_mask);
    let tile_threshold = cfg.tile_min_coverage.unwrap_or(0.0);

    let mut regions = vec![];
    for row in 0..rows {
        for col in 0..cols {
            let (rx, ry) = (col * region_mask, row * region_mask);
            let mut tiles = Vec::with_capacity((TILES_PER_SIDE * TILES_PER_SIDE) as usize);
            let mut tissue = 0u64;
            for ty in 0..TILES_PER_SIDE {
                for tx in 0..TILES_PER_SIDE {
                    let tile_rect = Rect::new(rx + tx * tile_mask, ry + ty * tile_mask, tile_mask, tile_mask);
                    let count = mask.count_in(&tile_rect);
                    tissue += count;
                    let coverage = count as f64 / tile_area;
                    tiles.push(TileSlot {
                        index: ty * TILES_PER_SIDE + tx,
                        rect: Rect::new(
                            col * region_native + tx * tile_native,
                            row * region_native + ty * tile_native,
                            tile_native,
                            tile_native,
                        ),
                        coverage,
                        kept: coverage >= tile_threshold,
                    });
                }
            }
            let coverage = tissue as f64 / (tile_area * tiles.len() as f64);
            if coverage >= cfg.region_min_coverage {
                regions.push(RegionPlan {
                    row,
                    col,
                    rect: Rect::new(
                        col * region_native,
                        row * region_native,
                        region_native,
                        region_native,
                    ),
                    resize_factor: spacing.resize_factor,
                    coverage,
                    tiles,
                });
            }
        }
    }
    Ok(TilePlan {
        canvas_width: mask.width() * ds,
        canvas_height: mask.height() * ds,
        spacing: *spacing,
        grid_rows: rows,
        grid_cols: cols,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct() -> SpacingChoice {
        choose_spacing(&SpacingPolicy::default(), &[0.5]).unwrap()
    }

    #[test]
    fn single_crop_is_identity() {
        let p = pack_sizes(&[(37, 81)], None).unwrap();
        assert_eq!((p.canvas_width, p.canvas_height), (37, 81));
        assert_eq!(p.placements[0].rect, Rect::new(0, 0, 37, 81));
    }

    #[test]
    fn two_squares_side_by_side() {
        let p = pack_sizes(&[(100, 100), (100, 100)], Some(250)).unwrap();
        assert_eq!((p.canvas_width, p.canvas_height), (200, 100));
        assert_eq!(p.placements[1].rect, Rect::new(100, 0, 100, 100));
        let p = pack_sizes(&[(100, 100), (100, 100)], Some(150)).unwrap();
        assert_eq!((p.canvas_width, p.canvas_height), (100, 200));
    }

    #[test]
    fn taller_first() {
        let p = pack_sizes(&[(50, 20), (50, 60), (50, 40)], Some(1000)).unwrap();
        assert_eq!(p.placements[1].rect.x, 0);
        assert_eq!(p.placements[2].rect.x, 50);
        assert_eq!(p.placements[0].rect.x, 100);
        assert_eq!(p.canvas_height, 60);
    }

    #[test]
    fn spacing_examples() {
        let pol = SpacingPolicy::default();
        let c = choose_spacing(&pol, &[0.51]).unwrap();
        assert_eq!(
            (c.native_mpp, c.resize_factor, c.extraction_px),
            (0.51, 1.0, 2048)
        );

        let c = choose_spacing(&pol, &[0.25, 0.55]).unwrap();
        assert_eq!(
            (c.native_mpp, c.resize_factor, c.extraction_px),
            (0.25, 0.5, 4096)
        );
        assert!((c.effective_mpp() - 0.5).abs() < 1e-9);

        assert!(matches!(
            choose_spacing(&pol, &[0.60]),
            Err(Error::NoValidSpacing { .. })
        ));
        // Range edges are inclusive.
        assert_eq!(choose_spacing(&pol, &[0.475]).unwrap().resize_factor, 1.0);
        assert_eq!(choose_spacing(&pol, &[0.525]).unwrap().resize_factor, 1.0);
        // Nearest-to-target finer level.
        let c = choose_spacing(&pol, &[0.125, 0.25, 1.0]).unwrap();
        assert_eq!(c.native_mpp, 0.25);
        // Closest in-range level.
        assert_eq!(choose_spacing(&pol, &[0.48, 0.505]).unwrap().native_mpp, 0.505);
    }

    #[test]
    fn full_canvas() {
        let mask = Mask::filled(4096, 4096, true);
        let plan = plan_tiles(&mask, &direct(), &PlanConfig::default()).unwrap();
        assert_eq!(plan.regions.len(), 4);
        assert_eq!(plan.tile_count(), 256);
    }

    #[test]
    fn empty_canvas() {
        let mask = Mask::filled(512, 512, false);
        let cfg = PlanConfig {
            mask_downsample: 8,
            ..Default::default()
        };
        let plan = plan_tiles(&mask, &direct(), &cfg).unwrap();
        assert!(plan.regions.is_empty());
    }

    #[test]
    fn partial_border_regions_dropped() {
        let mask = Mask::filled(600, 300, true);
        let cfg = PlanConfig {
            mask_downsample: 8,
            ..Default::default()
        };
        let plan = plan_tiles(&mask, &direct(), &cfg).unwrap();
        // 256-px regions in mask space: 2 columns, 1 row.
        assert_eq!((plan.grid_cols, plan.grid_rows, plan.regions.len()), (2, 1, 2));
        assert_eq!(plan.canvas_width, 4800);
    }

    #[test]
    fn tiles_partition_region() {
        let mask = Mask::filled(256, 256, true);
        let cfg = PlanConfig {
            mask_downsample: 8,
            ..Default::default()
        };
        let plan = plan_tiles(&mask, &direct(), &cfg).unwrap();
        let r = &plan.regions[0];
        assert_eq!(r.tiles.len(), 64);
        let area: u64 = r.tiles.iter().map(|t| t.rect.area()).sum();
        assert_eq!(area, r.rect.area());
        for (i, a) in r.tiles.iter().enumerate() {
            for b in &r.tiles[i + 1..] {
                assert!(!a.rect.intersects(&b.rect));
            }
        }
    }

    #[test]
    fn compose_places_masks() {
        let a = TissueCrop::new("s1", Rect::new(10, 10, 2, 2), 0.5, Mask::filled(2, 2, true)).unwrap();
        let b = TissueCrop::new(
            "s2",
            Rect::new(0, 0, 3, 1),
            0.5,
            Mask::from_fn(3, 1, |x, _| x == 1),
        )
        .unwrap();
        let p = pack(&[a, b.clone()], Some(100)).unwrap();
        let m = compose_mask(
            &[
                TissueCrop::new("s1", Rect::new(10, 10, 2, 2), 0.5, Mask::filled(2, 2, true)).unwrap(),
                b,
            ],
            &p,
        )
        .unwrap();
        assert_eq!(m.count(), 5);
        assert!(m.get(3, 0));
        assert!(!m.get(2, 0));
    }

    #[test]
    fn indivisible_region_rejected() {
        let mask = Mask::filled(10, 10, true);
        let cfg = PlanConfig {
            mask_downsample: 3,
            ..Default::default()
        };
        assert!(plan_tiles(&mask, &direct(), &cfg).is_err());
    }
}
