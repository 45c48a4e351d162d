//! Outcome-grounded interpretability.
//!
//! Occlusion scores measure how much a model's risk changes when a single tile
//! is dropped from a patient's bag. Factorized attention combines per-pixel
//! attention rasters from several encoders multiplicatively, and
//! [`render_heatmap`] turns the result into an overlay.

use serde::{Deserialize, Serialize};

use crate::mil::{predict_risk, AggregatorParams, FeatureBag};
use crate::quantile::quantile_sorted;
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 10;
pub const CLIP_LOW_QUANTILE: f64 = 0.05;
pub const CLIP_HIGH_QUANTILE: f64 = 0.95;
pub const DEFAULT_HEATMAP_THRESHOLD: f64 = 0.5;
pub const DEFAULT_HEATMAP_OPACITY: f64 = 0.5;
/// In raster cells. With one cell per region this is two region widths.
pub const DEFAULT_HEATMAP_SIGMA: f64 = 2.0;

/// Anything that maps a bag to a scalar risk.
pub trait RiskModel {
    fn risk(&self, bag: &FeatureBag) -> Result<f64>;
}

impl RiskModel for AggregatorParams {
    fn risk(&self, bag: &FeatureBag) -> Result<f64> {
        Ok(predict_risk(bag, self)?.0)
    }
}

/// Risk as the mean over all tiles of `w . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMeanPool {
    pub weights: Vec<f64>,
}

impl LinearMeanPool {
    pub fn tile_scores(&self, bag: &FeatureBag) -> Result<Vec<f64>> {
        if bag.dim() != self.weights.len() {
            return Err(Error::Shape(format!(
                "bag features have dim {}, model expects {}",
                bag.dim(),
                self.weights.len()
            )));
        }
        let d = bag.dim();
        Ok(bag
            .regions()
            .iter()
            .flat_map(|r| (0..r.rows()).map(move |t| r.row(t, d)))
            .map(|x| x.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
            .collect())
    }
}

impl RiskModel for LinearMeanPool {
    fn risk(&self, bag: &FeatureBag) -> Result<f64> {
        let s = self.tile_scores(bag)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionScore {
    /// Region-major tile index within the bag.
    pub tile: usize,
    pub region: usize,
    pub tile_in_region: usize,
    /// Full-bag risk minus risk with this tile removed.
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    /// One score per tile, in tile order.
    pub scores: Vec<ContributionScore>,
    /// Tile indices with the largest contributions, most positive first.
    pub top_positive: Vec<usize>,
    /// Tile indices with the smallest contributions, most negative first.
    pub top_negative: Vec<usize>,
}

/// Leave-one-tile-out risk differences for a bag.
///
/// Positive contributions raise risk. The two selections hold `k` tiles each
/// and never overlap, so the bag needs at least `2k` tiles.
pub fn occlusion_scores<M: RiskModel + ?Sized>(bag: &FeatureBag, model: &M, k: usize) -> Result<Occlusion> {
    let n = bag.num_tiles();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "occlusion needs a bag with at least 2 tiles".into(),
        ));
    }
    if n < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "bag has {n} tiles, fewer than the {} needed to select {k} per side",
            2 * k
        )));
    }
    let full = model.risk(bag)?;
    let mut scores = Vec::with_capacity(n);
    for tile in 0..n {
        let (region, tile_in_region) = bag.locate(tile).expect("tile index in range");
        let occluded = model.risk(&bag.without_tile(region, tile_in_region)?)?;
        scores.push(ContributionScore {
            tile,
            region,
            tile_in_region,
            raw: full - occluded,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].raw.total_cmp(&scores[a].raw).then(a.cmp(&b)));
    let top_positive = order[..k].to_vec();
    let mut top_negative: Vec<usize> = order[n - k..].to_vec();
    top_negative.reverse();
    Ok(Occlusion {
        scores,
        top_positive,
        top_negative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScore {
    pub raw: f64,
    pub clipped: f64,
    /// In [-1, 1].
    pub normalized: f64,
}

/// Clips raw scores to their 5th/95th percentiles and divides by the largest
/// absolute clipped value. The population is every score passed in, so pass
/// all tiles of all patients together.
pub fn normalize_contributions(raw: &[f64]) -> Result<Vec<NormalizedScore>> {
    if raw.is_empty() {
        return Err(Error::Empty("contribution scores"));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite contribution score".into()));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&sorted, CLIP_LOW_QUANTILE).expect("non-empty");
    let hi = quantile_sorted(&sorted, CLIP_HIGH_QUANTILE).expect("non-empty");
    let clipped: Vec<f64> = raw.iter().map(|&c| c.clamp(lo, hi)).collect();
    let max_abs = clipped.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    Ok(raw
        .iter()
        .zip(clipped)
        .map(|(&raw, clipped)| NormalizedScore {
            raw,
            clipped,
            normalized: if max_abs > 0.0 { clipped / max_abs } else { 0.0 },
        })
        .collect())
}

/// Row-major grid of non-negative values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Attention rasters from several encoders, one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub rasters: Vec<Raster>,
    /// Whether each encoder was kept frozen during training.
    pub frozen: Vec<bool>,
    pub gamma: f64,
}

impl AttentionStack {
    pub fn new(rasters: Vec<Raster>, frozen: Vec<bool>, gamma: f64) -> Result<Self> {
        let first = rasters.first().ok_or(Error::Empty("attention rasters"))?;
        if frozen.len() != rasters.len() {
            return Err(Error::Shape(format!(
                "{} rasters but {} frozen flags",
                rasters.len(),
                frozen.len()
            )));
        }
        for (j, r) in rasters.iter().enumerate() {
            if (r.width, r.height) != (first.width, first.height) {
                return Err(Error::Shape(format!(
                    "raster {j} is {}x{}, expected {}x{}",
                    r.width, r.height, first.width, first.height
                )));
            }
            if r.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "raster {j} has negative or non-finite attention"
                )));
            }
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be in [0, 1], got {gamma}"
            )));
        }
        Ok(Self {
            rasters,
            frozen,
            gamma,
        })
    }

    /// Exponent applied to raster `j`: `gamma` when trained, `1 - gamma` when frozen.
    pub fn exponent(&self, j: usize) -> f64 {
        if self.frozen[j] {
            1.0 - self.gamma
        } else {
            self.gamma
        }
    }
}

/// Per-pixel product of the rasters, each raised to its exponent, then
/// min-max normalized to [0, 1]. A zero exponent contributes exactly 1, so at
/// `gamma = 1` frozen encoders drop out.
pub fn factorized_attention(stack: &AttentionStack) -> Raster {
    let (w, h) = (stack.rasters[0].width, stack.rasters[0].height);
    let mut out = vec![1.0; w * h];
    for (j, r) in stack.rasters.iter().enumerate() {
        let e = stack.exponent(j);
        if e == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&r.data) {
            *o *= if e == 1.0 { *v } else { v.powf(e) };
        }
    }
    min_max(&mut out);
    Raster {
        width: w,
        height: h,
        data: out,
    }
}

fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Gaussian standard deviation in raster cells; 0 disables smoothing.
    pub sigma: f64,
    pub threshold: f64,
    pub opacity: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_HEATMAP_SIGMA,
            threshold: DEFAULT_HEATMAP_THRESHOLD,
            opacity: DEFAULT_HEATMAP_OPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Smoothed values before thresholding.
    pub smoothed: Raster,
    /// Smoothed values with everything below the threshold set to 0.
    pub scores: Raster,
    /// RGBA, row-major; transparent where filtered out.
    pub rgba: Vec<[u8; 4]>,
}

/// Normalized, truncated (3 sigma) Gaussian kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(r: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (w, h) = (r.width as isize, r.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let off = i as isize - radius;
                    let (sx, sy) = if horizontal { (x + off, y) } else { (x, y + off) };
                    if (0..w).contains(&sx) && (0..h).contains(&sy) {
                        acc += kv * src[(sy * w + sx) as usize];
                    }
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
        dst
    };
    let tmp = pass(&r.data, true);
    Raster {
        width: r.width,
        height: r.height,
        data: pass(&tmp, false),
    }
}

/// Blue to white to red ramp over `t` in [0, 1].
pub fn diverging_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (cold, mid, warm) = ([59.0, 76.0, 192.0], [242.0, 242.0, 242.0], [180.0, 4.0, 38.0]);
    let (a, b, s) = if t < 0.5 {
        (cold, mid, t * 2.0)
    } else {
        (mid, warm, t * 2.0 - 1.0)
    };
    let mix = |i: usize| (a[i] + (b[i] - a[i]) * s).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Smooths, thresholds and colors a normalized raster. Surviving values are
/// spread over the full ramp from the threshold up to 1.
pub fn render_heatmap(r: &Raster, cfg: &HeatmapConfig) -> Heatmap {
    let smoothed = gaussian_blur(r, cfg.sigma);
    let scores = Raster {
        width: r.width,
        height: r.height,
        data: smoothed
            .data
            .iter()
            .map(|&v| if v >= cfg.threshold { v } else { 0.0 })
            .collect(),
    };
    let alpha = (cfg.opacity.clamp(0.0, 1.0) * 255.0).round() as u8;
    let span = (1.0 - cfg.threshold).max(f64::MIN_POSITIVE);
    let rgba = smoothed
        .data
        .iter()
        .map(|&v| {
            if v >= cfg.threshold && v > 0.0 {
                let [r, g, b] = diverging_color((v - cfg.threshold) / span);
                [r, g, b, alpha]
            } else {
                [0, 0, 0, 0]
            }
        })
        .collect();
    Heatmap {
        smoothed,
        scores,
        rgba,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::TILES_PER_REGION;

    fn bag_from_scores(scores: &[f64]) -> FeatureBag {
        let regions = scores.chunks(TILES_PER_REGION).map(|c| c.to_vec()).collect();
        FeatureBag::new(1, regions).unwrap()
    }

    fn model() -> LinearMeanPool {
        LinearMeanPool { weights: vec![1.0] }
    }

    #[test]
    fn mean_pool_closed_form() {
        let s: Vec<f64> = (0..128).map(|i| ((i * 29) % 17) as f64 * 0.3 - 2.0).collect();
        let occ = occlusion_scores(&bag_from_scores(&s), &model(), 10).unwrap();
        let mean = s.iter().sum::<f64>() / 128.0;
        for (c, st) in occ.scores.iter().zip(&s) {
            assert!((c.raw - (st - mean) / 127.0).abs() < 1e-10);
        }
        let total: f64 = occ.scores.iter().map(|c| c.raw).sum();
        assert!(total.abs() < 1e-12);
        assert_eq!(occ.top_positive.len(), 10);
        assert_eq!(occ.top_negative.len(), 10);
        assert!(occ.top_positive.iter().all(|t| !occ.top_negative.contains(t)));
        let max = s.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(s[occ.top_positive[0]], max);
    }

    #[test]
    fn duplicated_tiles_shrink_contributions() {
        let s: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let once = occlusion_scores(&bag_from_scores(&s), &model(), 10).unwrap();
        let twice = occlusion_scores(&bag_from_scores(&[s.clone(), s].concat()), &model(), 10).unwrap();
        for t in 0..64 {
            let (a, b) = (once.scores[t].raw, twice.scores[t].raw);
            assert!(b.abs() <= a.abs());
            assert!((b - a * 63.0 / 127.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_bag_has_no_contributions() {
        let occ = occlusion_scores(&bag_from_scores(&[0.7; 64]), &model(), 10).unwrap();
        assert!(occ.scores.iter().all(|c| c.raw == 0.0));
    }

    #[test]
    fn too_small_bags_rejected() {
        let bag = bag_from_scores(&[1.0; 64]);
        let single = bag.without_tile(0, 0).unwrap();
        let mut single = single;
        for _ in 0..62 {
            single = single.without_tile(0, 0).unwrap();
        }
        assert_eq!(single.num_tiles(), 1);
        assert!(occlusion_scores(&single, &model(), 0).is_err());
        assert!(occlusion_scores(&bag, &model(), 33).is_err());
    }

    #[test]
    fn mil_model_occlusion_runs() {
        let params = AggregatorParams::init(1, 3, 0).unwrap();
        let s: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).cos()).collect();
        let occ = occlusion_scores(&bag_from_scores(&s), &params, 5).unwrap();
        assert_eq!(occ.scores.len(), 64);
        assert!(occ.scores.iter().all(|c| c.raw.is_finite()));
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_contributions(&[-1.0, 0.0, 1.0]).unwrap();
        for (s, want) in n.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((s.normalized - want).abs() < 1e-12);
        }

        let mut raw: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        raw.push(1000.0);
        let n = normalize_contributions(&raw).unwrap();
        let mut sorted = raw.clone();
        sorted.sort_by(f64::total_cmp);
        let q95 = quantile_sorted(&sorted, 0.95).unwrap();
        assert_eq!(n[100].clipped, q95);
        assert_eq!(n[100].normalized, 1.0);

        assert!(normalize_contributions(&[0.3; 5])
            .unwrap()
            .iter()
            .all(|s| s.normalized == 1.0));
        assert!(normalize_contributions(&[0.0; 5])
            .unwrap()
            .iter()
            .all(|s| s.normalized == 0.0));
        assert!(normalize_contributions(&[]).is_err());
    }

    fn raster(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Raster::new(w, h, data).unwrap()
    }

    #[test]
    fn frozen_raster_ignored_at_full_gamma() {
        let trained = raster(5, 4, |x, y| (x + 2 * y) as f64 / 10.0);
        let frozen_a = raster(5, 4, |x, _| x as f64);
        let frozen_b = raster(5, 4, |_, y| if y == 2 { 0.0 } else { 9.0 });
        let a = factorized_attention(
            &AttentionStack::new(vec![trained.clone(), frozen_a], vec![false, true], 1.0).unwrap(),
        );
        let b = factorized_attention(
            &AttentionStack::new(vec![trained.clone(), frozen_b], vec![false, true], 1.0).unwrap(),
        );
        assert_eq!(a, b);
        let single =
            factorized_attention(&AttentionStack::new(vec![trained.clone()], vec![false], 1.0).unwrap());
        assert_eq!(a, single);
    }

    #[test]
    fn uniform_raster_factors_out() {
        let r = raster(4, 3, |x, y| (x * y) as f64 + 1.0);
        let flat = raster(4, 3, |_, _| 0.25);
        let out = factorized_attention(
            &AttentionStack::new(vec![r.clone(), flat], vec![false, false], 1.0).unwrap(),
        );
        let single = factorized_attention(&AttentionStack::new(vec![r], vec![false], 1.0).unwrap());
        for (a, b) in out.data.iter().zip(&single.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(single.data.iter().copied().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(single.data.iter().copied().fold(f64::MAX, f64::min), 0.0);
    }

    #[test]
    fn stack_validation() {
        let a = Raster::zeros(3, 3);
        let b = Raster::zeros(3, 4);
        assert!(AttentionStack::new(vec![a.clone(), b], vec![false, false], 1.0).is_err());
        assert!(AttentionStack::new(vec![a.clone()], vec![false, true], 1.0).is_err());
        assert!(AttentionStack::new(vec![Raster::new(1, 1, vec![-1.0]).unwrap()], vec![false], 1.0).is_err());
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let mut r = Raster::zeros(41, 41);
        r.data[20 * 41 + 20] = 1.0;
        r.data[18 * 41 + 22] = 0.5;
        let b = gaussian_blur(&r, 2.0);
        assert!((b.sum() - 1.5).abs() < 1e-6);
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_examples() {
        let hm = render_heatmap(&Raster::zeros(6, 6), &HeatmapConfig::default());
        assert!(hm.rgba.iter().all(|p| p[3] == 0));

        let mut r = Raster::zeros(5, 5);
        r.data[12] = 1.0;
        let hm = render_heatmap(
            &r,
            &HeatmapConfig {
                sigma: 0.0,
                ..Default::default()
            },
        );
        let colored: Vec<usize> = (0..25).filter(|&i| hm.rgba[i][3] > 0).collect();
        assert_eq!(colored, vec![12]);
        assert_eq!(hm.rgba[12][3], 128);
        assert_eq!(hm.scores.data[12], 1.0);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(diverging_color(0.0), [59, 76, 192]);
        assert_eq!(diverging_color(0.5), [242, 242, 242]);
        assert_eq!(diverging_color(1.0), [180, 4, 38]);
    }
}
