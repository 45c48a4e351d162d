//! Recurrence-risk modeling toolkit.
//!
//! The crate covers the quantitative side of a postoperative recurrence study:
//!
//! - [`survival`]: four-bin discrete-time hazards, survival curves, the
//!   censoring-aware likelihood loss and scalar risk.
//! - [`mil`]: a small two-level attention-pooling aggregator over bags of tile
//!   features, trained on the survival loss.
//! - [`concordance`], [`cox`] and [`stats`]: Harrell's c-index, Cox
//!   proportional hazards with Wald inference, event-stratified bootstrap and
//!   Benjamini-Hochberg adjustment.
//! - [`capra`]: CAPRA-S scoring with stage-derived surrogates and cohort
//!   imputation.
//! - [`folds`]: multi-label iterative stratification into k folds.
//! - [`tiling`]: tissue packing, spacing selection and the region/tile grid.
//! - [`interpret`]: occlusion contributions and factorized attention heatmaps.
//! - [`synth`]: seeded synthetic cohorts with planted signal.

#![allow(clippy::needless_range_loop)]

pub mod capra;
pub mod concordance;
pub mod cox;
mod error;
pub mod folds;
pub mod interpret;
pub mod mil;
pub mod quantile;
pub mod stats;
pub mod survival;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
