use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bcrisk", version, about = "Recurrence-risk modeling toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (stdout when omitted, where that makes sense).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Bootstrap resamples.
    #[arg(long, global = true, value_name = "B")]
    pub bootstrap: Option<usize>,
    /// Weight of the uncensored term in the survival loss.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Significance level for FDR-adjusted comparisons.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Worker threads for bootstrap resampling.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a cohort with CAPRA-S.
    Capra { cohort: PathBuf },
    /// Concordance index of a score, with a bootstrap interval.
    Evaluate {
        scores: PathBuf,
        /// Cohort file holding time_months and event.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        score_column: Option<String>,
        /// Column (in the scores or cohort file) to report c-indices by.
        #[arg(long)]
        group_by: Option<String>,
    },
    /// Paired bootstrap comparison of two or more score files. Each file may
    /// be given as FILE:COLUMN to pick its score column.
    Compare {
        #[arg(num_args = 2.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        score_column: Option<String>,
    },
    /// Cox models on a deep-learning risk score, CAPRA-S, and both.
    Cox {
        scores: PathBuf,
        /// Cohort file with outcomes and CAPRA-S inputs.
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        score_column: Option<String>,
    },
    /// Stratified k-fold assignment.
    Split {
        cohort: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Pack tissue crops and plan region/tile extraction.
    Tileplan {
        manifest: PathBuf,
        /// Also write the packed canvas mask (PGM or PNG by extension).
        #[arg(long)]
        canvas_mask: Option<PathBuf>,
    },
    /// Train the attention aggregator on feature bags.
    Train {
        bags: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        /// Fold assignment from `split`; requires --test-fold.
        #[arg(long, requires = "test_fold")]
        folds_file: Option<PathBuf>,
        /// Fold to hold out from training.
        #[arg(long, requires = "folds_file")]
        test_fold: Option<usize>,
    },
    /// Risk scores from one model or the mean over several.
    Predict {
        bags: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
    },
    /// Leave-one-tile-out contribution scores.
    Occlude {
        bags: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Tiles kept per side.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Factorized attention heatmap from per-encoder attention rasters.
    Attention {
        /// Raster of a trained encoder (grayscale image).
        #[arg(long)]
        trained: Vec<PathBuf>,
        /// Raster of a frozen encoder (grayscale image).
        #[arg(long)]
        frozen: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        threshold: Option<f64>,
        /// JSON with the factorized and thresholded score grids.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Synthetic data with planted signal.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Cohort CSV with CAPRA-S inputs and outcomes.
    Cohort {
        #[arg(long, default_value_t = 500)]
        patients: usize,
        /// Also write a DLRS scores CSV.
        #[arg(long)]
        dlrs_out: Option<PathBuf>,
        /// Chance that each CAPRA-S field is left empty.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
    },
    /// Feature bags, a bag manifest and a matching cohort file in a directory.
    Bags {
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        patients: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
}
