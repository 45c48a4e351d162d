//! Two-level attention-pooling aggregator over bags of tile features.
//!
//! A patient is a bag of regions and each region holds 64 tile feature
//! vectors. Pooling runs twice:
//!
//! ```text
//! region m:  a = softmax(X_m w_r)        p_m = sum_t a_t x_t
//!            g_m = tanh(P^T p_m)                          (d -> e)
//! slide:     b = softmax(g w_s)          q = sum_m b_m g_m
//!            z = tanh(Q^T q)                              (e -> e)
//! head:      logits = W^T z + c,         hazards = sigmoid(logits)
//! ```
//!
//! Pooling sums run over a canonical (lexicographic) ordering of their inputs,
//! so outputs are bit-identical under any permutation of tiles within a
//! region or of regions within a bag.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concordance::cindex_slices;
use crate::survival::{
    nll_gradient, nll_loss, risk_from_hazards, HazardVector, RiskScore, SurvivalLabel, NUM_BINS,
};
use crate::{Error, Result};

pub const TILES_PER_REGION: usize = 64;
pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const DEFAULT_EMBED_DIM: usize = 8;

/// Tile features of one region, `rows x dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFeatures {
    rows: usize,
    data: Vec<f64>,
}

impl RegionFeatures {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, t: usize, dim: usize) -> &[f64] {
        &self.data[t * dim..(t + 1) * dim]
    }
}

/// A patient's tile features grouped by region.
///
/// Bags built with [`FeatureBag::new`] hold exactly 64 tiles per region.
/// Occluded copies from [`FeatureBag::without_tile`] may hold fewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBag {
    dim: usize,
    regions: Vec<RegionFeatures>,
}

impl FeatureBag {
    /// `regions[m]` is a flat `64 x dim` row-major matrix.
    pub fn new(dim: usize, regions: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        if regions.is_empty() {
            return Err(Error::Empty("bag regions"));
        }
        for (m, r) in regions.iter().enumerate() {
            if r.len() != TILES_PER_REGION * dim {
                return Err(Error::Shape(format!(
                    "region {m} has {} values, expected {TILES_PER_REGION} x {dim}",
                    r.len()
                )));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "region {m} has non-finite features"
                )));
            }
        }
        Ok(Self {
            dim,
            regions: regions
                .into_iter()
                .map(|data| RegionFeatures {
                    rows: TILES_PER_REGION,
                    data,
                })
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regions(&self) -> &[RegionFeatures] {
        &self.regions
    }

    pub fn num_tiles(&self) -> usize {
        self.regions.iter().map(|r| r.rows).sum()
    }

    /// `(region, tile)` of the `flat`-th tile in region-major order.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        let mut left = flat;
        for (m, r) in self.regions.iter().enumerate() {
            if left < r.rows {
                return Some((m, left));
            }
            left -= r.rows;
        }
        None
    }

    /// The bag with one tile removed. A region left without tiles is dropped.
    pub fn without_tile(&self, region: usize, tile: usize) -> Result<Self> {
        if self.num_tiles() <= 1 {
            return Err(Error::InvalidArgument(
                "cannot remove the only tile of a bag".into(),
            ));
        }
        let r = self
            .regions
            .get(region)
            .filter(|r| tile < r.rows)
            .ok_or_else(|| Error::InvalidArgument(format!("no tile {tile} in region {region}")))?;
        let mut regions = self.regions.clone();
        if r.rows == 1 {
            regions.remove(region);
        } else {
            let mut data = r.data.clone();
            data.drain(tile * self.dim..(tile + 1) * self.dim);
            regions[region] = RegionFeatures {
                rows: r.rows - 1,
                data,
            };
        }
        Ok(Self {
            dim: self.dim,
            regions,
        })
    }
}

/// Aggregator weights. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorParams {
    pub dim: usize,
    pub embed: usize,
    /// `dim`
    pub region_attention: Vec<f64>,
    /// `dim x embed`
    pub region_projection: Vec<f64>,
    /// `embed`
    pub slide_attention: Vec<f64>,
    /// `embed x embed`
    pub slide_projection: Vec<f64>,
    /// `embed x 4`
    pub head_weights: Vec<f64>,
    /// `4`
    pub head_bias: Vec<f64>,
}

impl AggregatorParams {
    pub fn zeros(dim: usize, embed: usize) -> Self {
        Self {
            dim,
            embed,
            region_attention: vec![0.0; dim],
            region_projection: vec![0.0; dim * embed],
            slide_attention: vec![0.0; embed],
            slide_projection: vec![0.0; embed * embed],
            head_weights: vec![0.0; embed * NUM_BINS],
            head_bias: vec![0.0; NUM_BINS],
        }
    }

    /// Seeded initialization scaled by `1 / sqrt(fan_in)`.
    pub fn init(dim: usize, embed: usize, seed: u64) -> Result<Self> {
        if dim == 0 || embed == 0 {
            return Err(Error::InvalidArgument("dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |v: &mut Vec<f64>, fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid sd");
            v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        let mut p = Self::zeros(dim, embed);
        fill(&mut p.region_attention, dim);
        fill(&mut p.region_projection, dim);
        fill(&mut p.slide_attention, embed);
        fill(&mut p.slide_projection, embed);
        fill(&mut p.head_weights, embed);
        Ok(p)
    }

    pub fn blocks(&self) -> [&Vec<f64>; 6] {
        [
            &self.region_attention,
            &self.region_projection,
            &self.slide_attention,
            &self.slide_projection,
            &self.head_weights,
            &self.head_bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.region_attention,
            &mut self.region_projection,
            &mut self.slide_attention,
            &mut self.slide_projection,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn check(&self) -> Result<()> {
        let (d, e) = (self.dim, self.embed);
        let expected = [d, d * e, e, e * e, e * NUM_BINS, NUM_BINS];
        for (b, n) in self.blocks().iter().zip(expected) {
            if b.len() != n {
                return Err(Error::Shape(format!(
                    "parameter block of length {} where {n} expected (dim {d}, embed {e})",
                    b.len()
                )));
            }
        }
        if self.blocks().iter().any(|b| b.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument("non-finite parameters".into()));
        }
        Ok(())
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `scores` visited in `order`.
fn softmax_ordered(scores: &[f64], order: &[usize]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = vec![0.0; scores.len()];
    let mut total = 0.0;
    for &i in order {
        w[i] = (scores[i] - max).exp();
        total += w[i];
    }
    for &i in order {
        w[i] /= total;
    }
    w
}

/// `y_j = tanh(sum_i x_i M[i][j])` for a row-major `x.len() x out` matrix.
fn project_tanh(x: &[f64], m: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * m[i * out + j];
        }
    }
    y.iter_mut().for_each(|v| *v = v.tanh());
    y
}

struct RegionCache {
    order: Vec<usize>,
    attention: Vec<f64>,
    pooled: Vec<f64>,
    embedding: Vec<f64>,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    regions: Vec<RegionCache>,
    region_order: Vec<usize>,
    slide_attention: Vec<f64>,
    slide_pooled: Vec<f64>,
    slide_embedding: Vec<f64>,
    pub hazards: HazardVector,
}

impl ForwardCache {
    /// Attention weight of every tile within its region, per region.
    pub fn tile_attention(&self) -> Vec<Vec<f64>> {
        self.regions.iter().map(|r| r.attention.clone()).collect()
    }

    /// Attention weight of every region at the slide level.
    pub fn region_attention(&self) -> &[f64] {
        &self.slide_attention
    }

    /// Region embeddings after the first pooling stage.
    pub fn region_embeddings(&self) -> Vec<Vec<f64>> {
        self.regions.iter().map(|r| r.embedding.clone()).collect()
    }
}

fn check_compat(bag: &FeatureBag, params: &AggregatorParams) -> Result<()> {
    params.check()?;
    if bag.dim != params.dim {
        return Err(Error::Shape(format!(
            "bag features have dim {}, parameters expect {}",
            bag.dim, params.dim
        )));
    }
    Ok(())
}

pub fn forward_cached(bag: &FeatureBag, params: &AggregatorParams) -> Result<ForwardCache> {
    check_compat(bag, params)?;
    let (d, e) = (params.dim, params.embed);

    let mut regions = Vec::with_capacity(bag.regions.len());
    for r in &bag.regions {
        let mut order: Vec<usize> = (0..r.rows).collect();
        order.sort_by(|&a, &b| lex_cmp(r.row(a, d), r.row(b, d)));
        let scores: Vec<f64> = (0..r.rows)
            .map(|t| dot(r.row(t, d), &params.region_attention))
            .collect();
        let attention = softmax_ordered(&scores, &order);
        let mut pooled = vec![0.0; d];
        for &t in &order {
            for (p, x) in pooled.iter_mut().zip(r.row(t, d)) {
                *p += attention[t] * x;
            }
        }
        let embedding = project_tanh(&pooled, &params.region_projection, e);
        regions.push(RegionCache {
            order,
            attention,
            pooled,
            embedding,
        });
    }

    let mut region_order: Vec<usize> = (0..regions.len()).collect();
    region_order.sort_by(|&a, &b| lex_cmp(&regions[a].embedding, &regions[b].embedding));
    let scores: Vec<f64> = regions
        .iter()
        .map(|r| dot(&r.embedding, &params.slide_attention))
        .collect();
    let slide_attention = softmax_ordered(&scores, &region_order);
    let mut slide_pooled = vec![0.0; e];
    for &m in &region_order {
        for (q, g) in slide_pooled.iter_mut().zip(&regions[m].embedding) {
            *q += slide_attention[m] * g;
        }
    }
    let slide_embedding = project_tanh(&slide_pooled, &params.slide_projection, e);
    let mut logits = [0.0; NUM_BINS];
    for (k, l) in logits.iter_mut().enumerate() {
        *l = params.head_bias[k]
            + (0..e)
                .map(|j| slide_embedding[j] * params.head_weights[j * NUM_BINS + k])
                .sum::<f64>();
    }
    Ok(ForwardCache {
        regions,
        region_order,
        slide_attention,
        slide_pooled,
        slide_embedding,
        hazards: HazardVector::from_logits(&logits),
    })
}

/// Hazards for a bag.
pub fn forward(bag: &FeatureBag, params: &AggregatorParams) -> Result<HazardVector> {
    Ok(forward_cached(bag, params)?.hazards)
}

/// Scalar risk for a bag.
pub fn predict_risk(bag: &FeatureBag, params: &AggregatorParams) -> Result<RiskScore> {
    Ok(risk_from_hazards(&forward(bag, params)?))
}

/// Backpropagates `dL/dlogits` through the cached forward pass.
fn backward(
    bag: &FeatureBag,
    params: &AggregatorParams,
    cache: &ForwardCache,
    dlogits: &[f64; NUM_BINS],
) -> AggregatorParams {
    let (d, e) = (params.dim, params.embed);
    let mut grad = AggregatorParams::zeros(d, e);

    // Head.
    let z = &cache.slide_embedding;
    let mut dz = vec![0.0; e];
    for j in 0..e {
        for k in 0..NUM_BINS {
            grad.head_weights[j * NUM_BINS + k] = z[j] * dlogits[k];
            dz[j] += params.head_weights[j * NUM_BINS + k] * dlogits[k];
        }
    }
    grad.head_bias.copy_from_slice(dlogits);

    // Slide projection.
    let dz_pre: Vec<f64> = dz.iter().zip(z).map(|(g, zj)| g * (1.0 - zj * zj)).collect();
    let q = &cache.slide_pooled;
    let mut dq = vec![0.0; e];
    for i in 0..e {
        for j in 0..e {
            grad.slide_projection[i * e + j] = q[i] * dz_pre[j];
            dq[i] += params.slide_projection[i * e + j] * dz_pre[j];
        }
    }

    // Slide attention pooling.
    let b = &cache.slide_attention;
    let db: Vec<f64> = cache.regions.iter().map(|r| dot(&r.embedding, &dq)).collect();
    let mean_db: f64 = cache.region_order.iter().map(|&m| b[m] * db[m]).sum();
    let mut dg: Vec<Vec<f64>> = Vec::with_capacity(cache.regions.len());
    for (m, r) in cache.regions.iter().enumerate() {
        let dv = b[m] * (db[m] - mean_db);
        for (gs, g) in grad.slide_attention.iter_mut().zip(&r.embedding) {
            *gs += dv * g;
        }
        dg.push(
            (0..e)
                .map(|j| b[m] * dq[j] + dv * params.slide_attention[j])
                .collect(),
        );
    }

    // Region projection and tile attention pooling.
    for (m, r) in cache.regions.iter().enumerate() {
        let du: Vec<f64> = dg[m]
            .iter()
            .zip(&r.embedding)
            .map(|(g, gj)| g * (1.0 - gj * gj))
            .collect();
        let mut dp = vec![0.0; d];
        for i in 0..d {
            for j in 0..e {
                grad.region_projection[i * e + j] += r.pooled[i] * du[j];
                dp[i] += params.region_projection[i * e + j] * du[j];
            }
        }
        let feats = &bag.regions[m];
        let a = &r.attention;
        let da: Vec<f64> = (0..feats.rows).map(|t| dot(feats.row(t, d), &dp)).collect();
        let mean_da: f64 = r.order.iter().map(|&t| a[t] * da[t]).sum();
        for &t in &r.order {
            let ds = a[t] * (da[t] - mean_da);
            for (gw, x) in grad.region_attention.iter_mut().zip(feats.row(t, d)) {
                *gw += ds * x;
            }
        }
    }
    grad
}

/// Loss and parameter gradient for one labelled bag.
pub fn loss_and_gradient(
    bag: &FeatureBag,
    label: SurvivalLabel,
    params: &AggregatorParams,
    alpha: f64,
) -> Result<(f64, AggregatorParams)> {
    let cache = forward_cached(bag, params)?;
    let loss = nll_loss(&cache.hazards, label, alpha);
    let dlogits = nll_gradient(&cache.hazards, label, alpha);
    Ok((loss, backward(bag, params, &cache, &dlogits)))
}

pub fn loss(bag: &FeatureBag, label: SurvivalLabel, params: &AggregatorParams, alpha: f64) -> Result<f64> {
    Ok(nll_loss(&forward(bag, params)?, label, alpha))
}

/// Step used by [`grad_check`] for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error in [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between backprop and central finite differences
/// over every parameter: `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    bag: &FeatureBag,
    label: SurvivalLabel,
    params: &AggregatorParams,
    alpha: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_gradient(bag, label, params, alpha)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for b in 0..6 {
        for i in 0..params.blocks()[b].len() {
            let orig = params.blocks()[b][i];
            probe.blocks_mut()[b][i] = orig + GRAD_CHECK_STEP;
            let up = loss(bag, label, &probe, alpha)?;
            probe.blocks_mut()[b][i] = orig - GRAD_CHECK_STEP;
            let down = loss(bag, label, &probe, alpha)?;
            probe.blocks_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic.blocks()[b][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without tuning-loss improvement...
    pub patience: usize,
    /// ...but never before this many epochs.
    pub min_epochs: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Share of the dataset held out for early stopping.
    pub tuning_fraction: f64,
    pub embed_dim: usize,
    pub optimizer: Optimizer,
    /// Train only the hazard head; attention and projections stay frozen.
    pub head_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            halving_period: 20,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 20,
            min_epochs: 50,
            accumulation_steps: 32,
            seed: 0,
            alpha: crate::survival::DEFAULT_ALPHA,
            tuning_fraction: 0.2,
            embed_dim: DEFAULT_EMBED_DIM,
            optimizer: Optimizer::Sgd,
            head_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.halving_period == 0 || self.max_epochs == 0 || self.accumulation_steps == 0 {
            return bad("halving period, max epochs and accumulation steps must be >= 1");
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad("patience must be in 1..=max_epochs");
        }
        if self.weight_decay < 0.0 {
            return bad("weight decay must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.tuning_fraction) {
            return bad("tuning fraction must be in [0, 1)");
        }
        if self.embed_dim == 0 {
            return bad("embedding dimension must be >= 1");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.halving_period) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Parameters at the epoch with the lowest tuning loss.
    pub params: AggregatorParams,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean training loss per epoch, accumulated before each update.
    pub train_loss: Vec<f64>,
    pub tuning_loss: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub tuning_indices: Vec<usize>,
}

pub type LabelledBag = (FeatureBag, SurvivalLabel);

/// Splits off a seeded tuning subset, initializes parameters from the seed
/// and trains.
pub fn train(dataset: &[LabelledBag], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let first = dataset.first().ok_or(Error::Empty("training dataset"))?;
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_tune = if dataset.len() >= 2 {
        ((dataset.len() as f64 * cfg.tuning_fraction).round() as usize).min(dataset.len() - 1)
    } else {
        0
    };
    let tuning: Vec<usize> = idx[..n_tune].to_vec();
    let training: Vec<usize> = idx[n_tune..].to_vec();
    let init = AggregatorParams::init(first.0.dim, cfg.embed_dim, cfg.seed)?;
    train_from(init, dataset, &training, &tuning, cfg)
}

fn mean_loss(dataset: &[LabelledBag], idx: &[usize], params: &AggregatorParams, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        total += loss(&dataset[i].0, dataset[i].1, params, alpha)?;
    }
    Ok(total / idx.len() as f64)
}

struct OptimizerState {
    m: AggregatorParams,
    v: AggregatorParams,
    steps: i32,
}

/// Trains from given initial parameters on explicit train/tuning index sets.
/// With an empty tuning set, early stopping follows the training loss.
pub fn train_from(
    init: AggregatorParams,
    dataset: &[LabelledBag],
    training: &[usize],
    tuning: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    init.check()?;
    if training.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for &i in training.iter().chain(tuning) {
        let bag = &dataset
            .get(i)
            .ok_or(Error::Shape(format!("index {i} out of range")))?
            .0;
        check_compat(bag, &init)?;
    }

    let mut params = init;
    let mut state = OptimizerState {
        m: AggregatorParams::zeros(params.dim, params.embed),
        v: AggregatorParams::zeros(params.dim, params.embed),
        steps: 0,
    };
    let trainable: &[usize] = if cfg.head_only {
        &[4, 5]
    } else {
        &[0, 1, 2, 3, 4, 5]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order = training.to_vec();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0;
    let mut train_loss = vec![];
    let mut tuning_loss = vec![];

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut epoch_loss = 0.0;
        let mut acc = AggregatorParams::zeros(params.dim, params.embed);
        let mut pending = 0usize;
        for (step, &i) in order.iter().enumerate() {
            let (l, g) = loss_and_gradient(&dataset[i].0, dataset[i].1, &params, cfg.alpha)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("training sample {i}"),
                });
            }
            epoch_loss += l;
            for b in trainable {
                for (a, x) in acc.blocks_mut()[*b].iter_mut().zip(g.blocks()[*b]) {
                    *a += x;
                }
            }
            pending += 1;
            if pending == cfg.accumulation_steps || step + 1 == order.len() {
                apply_update(&mut params, &mut acc, pending, lr, cfg, trainable, &mut state);
                pending = 0;
            }
        }
        let epoch_loss = epoch_loss / order.len() as f64;
        train_loss.push(epoch_loss);

        let monitored = if tuning.is_empty() {
            epoch_loss
        } else {
            mean_loss(dataset, tuning, &params, cfg.alpha)?
        };
        if !monitored.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: "tuning loss".into(),
            });
        }
        tuning_loss.push(monitored);
        if monitored < best.0 {
            best = (monitored, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience && epoch + 1 >= cfg.min_epochs {
            break;
        }
    }
    let epochs_run = train_loss.len();
    Ok(TrainReport {
        params: best.2,
        best_epoch: best.1,
        epochs_run,
        train_loss,
        tuning_loss,
        train_indices: training.to_vec(),
        tuning_indices: tuning.to_vec(),
    })
}

fn apply_update(
    params: &mut AggregatorParams,
    acc: &mut AggregatorParams,
    count: usize,
    lr: f64,
    cfg: &TrainConfig,
    trainable: &[usize],
    state: &mut OptimizerState,
) {
    state.steps += 1;
    let scale = 1.0 / count as f64;
    for &b in trainable {
        let theta = &mut params.blocks_mut()[b];
        let g_acc = &mut acc.blocks_mut()[b];
        let m = &mut state.m.blocks_mut()[b];
        let v = &mut state.v.blocks_mut()[b];
        for i in 0..theta.len() {
            let g = g_acc[i] * scale + cfg.weight_decay * theta[i];
            g_acc[i] = 0.0;
            match cfg.optimizer {
                Optimizer::Sgd => theta[i] -= lr * g,
                Optimizer::Adam { beta1, beta2, eps } => {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / (1.0 - beta1.powi(state.steps));
                    let v_hat = v[i] / (1.0 - beta2.powi(state.steps));
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Harrell's c-index of model risk on the given samples.
pub fn cindex_on(
    bags: &[&FeatureBag],
    times: &[f64],
    events: &[bool],
    params: &AggregatorParams,
) -> Result<f64> {
    let risks = bags
        .iter()
        .map(|b| predict_risk(b, params).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    cindex_slices(times, events, &risks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bag(dim: usize, regions: usize, seed: u64) -> FeatureBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regs = (0..regions)
            .map(|_| {
                (0..TILES_PER_REGION * dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        FeatureBag::new(dim, regs).unwrap()
    }

    #[test]
    fn bag_validation() {
        assert!(FeatureBag::new(4, vec![vec![0.0; 63 * 4]]).is_err());
        assert!(FeatureBag::new(4, vec![]).is_err());
        assert!(FeatureBag::new(4, vec![vec![f64::NAN; 64 * 4]]).is_err());
        let bag = random_bag(4, 2, 0);
        assert_eq!(bag.num_tiles(), 128);
        assert_eq!(bag.locate(64), Some((1, 0)));
        assert_eq!(bag.locate(128), None);
        let smaller = bag.without_tile(1, 5).unwrap();
        assert_eq!(smaller.num_tiles(), 127);
        assert_eq!(smaller.regions()[1].row(5, 4), bag.regions()[1].row(6, 4));
    }

    #[test]
    fn shape_mismatch() {
        let bag = random_bag(4, 1, 0);
        let params = AggregatorParams::init(5, 3, 0).unwrap();
        assert!(matches!(forward(&bag, &params), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_tiles_give_uniform_attention() {
        let bag = FeatureBag::new(3, vec![[0.2, -0.4, 1.0].repeat(64), [0.2, -0.4, 1.0].repeat(64)]).unwrap();
        let params = AggregatorParams::init(3, 4, 1).unwrap();
        let cache = forward_cached(&bag, &params).unwrap();
        for region in cache.tile_attention() {
            for a in region {
                assert!((a - 1.0 / 64.0).abs() < 1e-15);
            }
        }
        for &b in cache.region_attention() {
            assert!((b - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn hazards_in_unit_interval() {
        let params = AggregatorParams::init(16, 8, 3).unwrap();
        for s in 0..10 {
            let h = forward(&random_bag(16, 1 + s % 3, s as u64), &params).unwrap();
            assert!(h.values().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = AggregatorParams::init(6, 4, 11).unwrap();
        let bag = random_bag(6, 3, 12);
        for label in [
            SurvivalLabel::event(2).unwrap(),
            SurvivalLabel::censored_at(1).unwrap(),
        ] {
            let err = grad_check(&bag, label, &params, 0.25).unwrap();
            assert!(err < 1e-4, "max relative error {err}");
        }
    }

    #[test]
    fn zero_features_zero_attention_gradients() {
        let bag = FeatureBag::new(5, vec![vec![0.0; 64 * 5]; 3]).unwrap();
        let params = AggregatorParams::init(5, 4, 2).unwrap();
        let (_, g) = loss_and_gradient(&bag, SurvivalLabel::event(1).unwrap(), &params, 0.25).unwrap();
        assert!(g.region_attention.iter().all(|&x| x == 0.0));
        assert!(g.slide_attention.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        // dim = embed = 1, one region: hand-derived gradients.
        let xs: Vec<f64> = (0..64).map(|t| ((t * 37) % 64) as f64 / 32.0 - 1.0).collect();
        let bag = FeatureBag::new(1, vec![xs.clone()]).unwrap();
        let mut p = AggregatorParams::zeros(1, 1);
        p.region_attention = vec![0.7];
        p.region_projection = vec![1.3];
        p.slide_attention = vec![-0.4];
        p.slide_projection = vec![0.9];
        p.head_weights = vec![0.5, -0.2, 1.1, 0.3];
        p.head_bias = vec![-1.0, 0.1, 0.0, 0.4];
        let label = SurvivalLabel::event(2).unwrap();

        let w: Vec<f64> = xs.iter().map(|x| (0.7 * x).exp()).collect();
        let total: f64 = w.iter().sum();
        let a: Vec<f64> = w.iter().map(|v| v / total).collect();
        let pooled: f64 = a.iter().zip(&xs).map(|(a, x)| a * x).sum();
        let var: f64 = a.iter().zip(&xs).map(|(a, x)| a * x * (x - pooled)).sum();
        let g = (1.3 * pooled).tanh();
        let z = (0.9 * g).tanh();
        let logits: Vec<f64> = (0..4).map(|k| p.head_bias[k] + z * p.head_weights[k]).collect();
        let h = HazardVector::from_logits(&[logits[0], logits[1], logits[2], logits[3]]);
        let delta = nll_gradient(&h, label, 0.25);
        let dz: f64 = (0..4).map(|k| p.head_weights[k] * delta[k]).sum();
        let dzpre = dz * (1.0 - z * z);
        let dupre = dzpre * 0.9 * (1.0 - g * g);

        let (_, grad) = loss_and_gradient(&bag, label, &p, 0.25).unwrap();
        for k in 0..4 {
            assert!((grad.head_weights[k] - z * delta[k]).abs() < 1e-12);
            assert!((grad.head_bias[k] - delta[k]).abs() < 1e-12);
        }
        assert!((grad.slide_projection[0] - g * dzpre).abs() < 1e-12);
        assert!((grad.region_projection[0] - pooled * dupre).abs() < 1e-12);
        assert!((grad.region_attention[0] - var * 1.3 * dupre).abs() < 1e-12);
        assert_eq!(grad.slide_attention[0], 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data: Vec<LabelledBag> = (0..6)
            .map(|i| {
                (
                    random_bag(4, 1, i),
                    SurvivalLabel::new((i % 4) as usize, i % 2 == 0).unwrap(),
                )
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.0,
            max_epochs: 3,
            patience: 3,
            min_epochs: 1,
            embed_dim: 3,
            ..Default::default()
        };
        let init = AggregatorParams::init(4, 3, cfg.seed).unwrap();
        let report = train(&data, &cfg).unwrap();
        assert_eq!(report.params, init);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 2e-4);
        assert_eq!(cfg.learning_rate_at(19), 2e-4);
        assert_eq!(cfg.learning_rate_at(20), 1e-4);
        assert_eq!(cfg.learning_rate_at(45), 5e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            patience: 200,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(train(&[], &TrainConfig::default()).is_err());
    }
}
