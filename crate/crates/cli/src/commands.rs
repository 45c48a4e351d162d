use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use bcrisk::capra::{self, CapraScore, RiskGroup};
use bcrisk::concordance::{cindex_by_group, OutcomePair};
use bcrisk::cox::{self, CoxData};
use bcrisk::folds::{stratified_kfold, StratumLabels};
use bcrisk::interpret::{
    factorized_attention, normalize_contributions, occlusion_scores, render_heatmap, AttentionStack,
    RiskModel,
};
use bcrisk::mil::{self, AggregatorParams, FeatureBag, LabelledBag};
use bcrisk::stats::{bootstrap_ci, compare_family, BootstrapCi};
use bcrisk::survival::{ensemble_risk, make_bins, RiskScore, TimeBins};
use bcrisk::synth::{self, isup_grade, CohortConfig, PlantedBagConfig};
use bcrisk::tiling::{self, Rect, TissueCrop};
use serde::{Deserialize, Serialize};

use crate::cli::{Command, GlobalArgs, SynthCommand};
use crate::config::{Provenance, RunConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::io::{self, BagEntry, BagManifest, Located, Table, COHORT_COLUMNS};

/// Config file plus flag overrides.
pub fn effective_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(b) = g.bootstrap {
        cfg.bootstrap = b;
    }
    if let Some(a) = g.alpha {
        cfg.alpha = a;
    }
    if let Some(t) = g.tau {
        cfg.tau = t;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(g: &GlobalArgs, cmd: &Command) -> CliResult<()> {
    let cfg = effective_config(g)?;
    let out = g.out.as_deref();
    match cmd {
        Command::Capra { cohort } => cmd_capra(&cfg, cohort, out),
        Command::Evaluate {
            scores,
            outcomes,
            score_column,
            group_by,
        } => cmd_evaluate(
            &cfg,
            scores,
            outcomes,
            score_column.as_deref(),
            group_by.as_deref(),
            out,
        ),
        Command::Compare {
            scores,
            outcomes,
            score_column,
        } => cmd_compare(&cfg, scores, outcomes, score_column.as_deref(), out),
        Command::Cox {
            scores,
            outcomes,
            score_column,
        } => cmd_cox(&cfg, scores, outcomes, score_column.as_deref(), out),
        Command::Split { cohort, folds } => {
            let cfg = RunConfig {
                folds: folds.unwrap_or(cfg.folds),
                ..cfg
            };
            cmd_split(&cfg, cohort, out)
        }
        Command::Tileplan {
            manifest,
            canvas_mask,
        } => cmd_tileplan(&cfg, manifest, canvas_mask.as_deref(), out),
        Command::Train {
            bags,
            outcomes,
            folds_file,
            test_fold,
        } => {
            let holdout = folds_file.as_deref().zip(*test_fold);
            cmd_train(&cfg, bags, outcomes, holdout, out)
        }
        Command::Predict { bags, models } => cmd_predict(&cfg, bags, models, out),
        Command::Occlude { bags, models, k } => {
            let cfg = RunConfig {
                top_k: k.unwrap_or(cfg.top_k),
                ..cfg
            };
            cmd_occlude(&cfg, bags, models, out)
        }
        Command::Attention {
            trained,
            frozen,
            gamma,
            sigma,
            threshold,
            grid,
        } => {
            let mut cfg = cfg;
            if let Some(s) = sigma {
                cfg.heatmap.sigma = *s;
            }
            if let Some(t) = threshold {
                cfg.heatmap.threshold = *t;
            }
            let out =
                out.ok_or_else(|| CliError::Usage("attention needs --out for the heatmap image".into()))?;
            cmd_attention(&cfg, trained, frozen, *gamma, grid.as_deref(), out)
        }
        Command::Synth(SynthCommand::Cohort {
            patients,
            dlrs_out,
            missing_rate,
        }) => cmd_synth_cohort(&cfg, *patients, *missing_rate, dlrs_out.as_deref(), out),
        Command::Synth(SynthCommand::Bags { dir, patients, dim }) => {
            cmd_synth_bags(&cfg, dir, *patients, *dim)
        }
    }
}

fn csv_out(path: Option<&Path>, prov: &Provenance) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let mut w = io::output(path)?;
    w.write_all(prov.csv_line().as_bytes())
        .map_err(|e| CliError::data(e.to_string()))?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("writing CSV: {e}"))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_capra(cfg: &RunConfig, cohort: &Path, out: Option<&Path>) -> CliResult<()> {
    let rows = io::read_cohort(cohort)?;
    let records = rows.iter().map(io::clin_record).collect::<CliResult<Vec<_>>>()?;
    let scores = capra::score_cohort(&records)?;
    let prov = Provenance::new("capra", cfg);
    let mut w = csv_out(out, &prov)?;
    w.write_record([
        "patient_id",
        "psa_points",
        "gleason_points",
        "sm_points",
        "svi_points",
        "ece_points",
        "lni_points",
        "capra_s",
        "risk_group",
        "inferred",
        "imputed",
    ])
    .map_err(csv_err)?;
    for s in &scores {
        let c = &s.components;
        w.write_record([
            s.patient_id.clone(),
            c.psa.to_string(),
            c.gleason.to_string(),
            c.sm.to_string(),
            c.svi.to_string(),
            c.ece.to_string(),
            c.lni.to_string(),
            s.points.to_string(),
            s.group.as_str().to_string(),
            s.inferred.names(),
            s.imputed.names(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    let summary = group_summary(&scores);
    let text: Vec<String> = summary.iter().map(|(g, n)| format!("{g}: {n}")).collect();
    if out.is_some() {
        println!("{}", text.join("\n"));
    } else {
        eprintln!("{}", text.join("\n"));
    }
    Ok(())
}

fn group_summary(scores: &[CapraScore]) -> Vec<(&'static str, usize)> {
    [RiskGroup::Low, RiskGroup::Intermediate, RiskGroup::High]
        .iter()
        .map(|g| (g.as_str(), scores.iter().filter(|s| s.group == *g).count()))
        .collect()
}

/// Scores joined with outcomes, in cohort-file order.
struct Joined {
    ids: Vec<String>,
    pairs: Vec<OutcomePair>,
}

fn join_scores(
    scores_path: &Path,
    column: Option<&str>,
    cohort: &[Located<io::CohortRow>],
) -> CliResult<Joined> {
    let table = Table::read(scores_path)?;
    let col = table.score_column(column, scores_path)?;
    let values = table.numeric(col, scores_path)?;
    let outcomes = io::outcomes(cohort)?;
    if let Some(id) = table.order.iter().find(|id| !outcomes.contains_key(*id)) {
        return Err(CliError::data(format!(
            "{}: patient {id} has no outcome",
            scores_path.display()
        )));
    }
    let mut ids = vec![];
    let mut pairs = vec![];
    for row in cohort {
        let id = &row.value.patient_id;
        if let Some(&score) = values.get(id) {
            let (t, e) = outcomes[id];
            ids.push(id.clone());
            pairs.push(OutcomePair::new(t, e, score));
        }
    }
    let skipped = cohort.len() - ids.len();
    if skipped > 0 {
        log::warn!(
            "{skipped} cohort patients have no score in {}",
            scores_path.display()
        );
    }
    Ok(Joined { ids, pairs })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    pub cindex: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub provenance: Provenance,
    pub n: usize,
    pub events: usize,
    pub cindex: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub resamples: usize,
    pub redraws: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub groups: Vec<GroupRow>,
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    scores: &Path,
    outcomes: &Path,
    column: Option<&str>,
    group_by: Option<&str>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cohort = io::read_cohort(outcomes)?;
    let mut joined = join_scores(scores, column, &cohort)?;
    let mut groups = vec![];
    if let Some(g) = group_by {
        let score_table = Table::read(scores)?;
        let cohort_table = Table::read(outcomes)?;
        let (table, col) = match score_table.column(g) {
            Some(c) => (&score_table, c),
            None => (
                &cohort_table,
                cohort_table
                    .column(g)
                    .ok_or_else(|| CliError::Usage(format!("no column named {g} in scores or cohort")))?,
            ),
        };
        for (id, p) in joined.ids.iter().zip(joined.pairs.iter_mut()) {
            let label = table.rows.get(id).map(|r| r[col].clone()).unwrap_or_default();
            p.group = Some(label);
        }
        for (label, c) in cindex_by_group(&joined.pairs)? {
            let n = joined
                .pairs
                .iter()
                .filter(|p| p.group.as_deref() == Some(&label))
                .count();
            groups.push(GroupRow {
                group: label,
                n,
                cindex: c,
            });
        }
    }
    let BootstrapCi {
        estimate,
        ci_lower,
        ci_upper,
        resamples,
        redraws,
    } = bootstrap_ci(&joined.pairs, &cfg.bootstrap_config())?;
    let report = EvaluateReport {
        provenance: Provenance::new("evaluate", cfg),
        n: joined.pairs.len(),
        events: joined.pairs.iter().filter(|p| p.event).count(),
        cindex: estimate,
        ci_lower,
        ci_upper,
        resamples,
        redraws,
        group_by: group_by.map(str::to_string),
        groups,
    };
    io::write_json(out, &report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub first: String,
    pub second: String,
    pub delta: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p: f64,
    pub q: f64,
    pub significant: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub provenance: Provenance,
    pub models: Vec<String>,
    pub tau: f64,
    pub resamples: usize,
    pub comparisons: Vec<ComparisonRow>,
}

/// `FILE:COLUMN` selects a column; a path that exists as given is taken whole.
fn split_column(spec: &Path) -> (PathBuf, Option<String>) {
    let text = spec.to_string_lossy();
    match text.rsplit_once(':') {
        Some((file, col)) if !spec.exists() && !col.is_empty() => {
            (PathBuf::from(file), Some(col.to_string()))
        }
        _ => (spec.to_path_buf(), None),
    }
}

fn model_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| split_column(p).0)
        .map(|p| {
            p.file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    let unique = stems.iter().collect::<std::collections::BTreeSet<_>>().len() == stems.len();
    if unique {
        stems
    } else {
        paths.iter().map(|p| p.display().to_string()).collect()
    }
}

pub fn cmd_compare(
    cfg: &RunConfig,
    scores: &[PathBuf],
    outcomes: &Path,
    column: Option<&str>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cohort = io::read_cohort(outcomes)?;
    let names = model_names(scores);
    let mut models = vec![];
    let mut ids: Option<Vec<String>> = None;
    for (name, spec) in names.iter().zip(scores) {
        let (path, col) = split_column(spec);
        let j = join_scores(&path, col.as_deref().or(column), &cohort)?;
        if let Some(prev) = &ids {
            if *prev != j.ids {
                return Err(CliError::data(format!(
                    "{} scores a different set of patients than {}",
                    path.display(),
                    scores[0].display()
                )));
            }
        }
        ids = Some(j.ids);
        models.push((name.clone(), j.pairs));
    }
    let rows = compare_family(&models, &cfg.bootstrap_config())?;
    let report = CompareReport {
        provenance: Provenance::new("compare", cfg),
        models: names,
        tau: cfg.tau,
        resamples: cfg.bootstrap,
        comparisons: rows
            .into_iter()
            .map(|r| ComparisonRow {
                first: r.first,
                second: r.second,
                delta: r.result.delta,
                ci_lower: r.result.ci_lower,
                ci_upper: r.result.ci_upper,
                p: r.result.p,
                q: r.result.q,
                significant: r.result.q < cfg.tau,
            })
            .collect(),
    };
    io::write_json(out, &report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CindexSummary {
    pub cindex: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl From<BootstrapCi> for CindexSummary {
    fn from(b: BootstrapCi) -> Self {
        Self {
            cindex: b.estimate,
            ci_lower: b.ci_lower,
            ci_upper: b.ci_upper,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CovariateRow {
    pub name: String,
    pub coefficient: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CoxReport {
    pub provenance: Provenance,
    pub n: usize,
    pub events: usize,
    pub dlrs: CindexSummary,
    pub capra: CindexSummary,
    pub joint: CindexSummary,
    pub covariates: Vec<CovariateRow>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn cmd_cox(
    cfg: &RunConfig,
    scores: &Path,
    outcomes: &Path,
    column: Option<&str>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cohort = io::read_cohort(outcomes)?;
    let joined = join_scores(scores, column, &cohort)?;
    let records = cohort
        .iter()
        .map(io::clin_record)
        .collect::<CliResult<Vec<_>>>()?;
    let capra_by_id: BTreeMap<String, f64> = capra::score_cohort(&records)?
        .into_iter()
        .map(|s| (s.patient_id, f64::from(s.points)))
        .collect();
    let capra_pairs: Vec<OutcomePair> = joined
        .ids
        .iter()
        .zip(&joined.pairs)
        .map(|(id, p)| OutcomePair::new(p.time, p.event, capra_by_id[id]))
        .collect();

    let data = CoxData::new(
        joined.pairs.iter().map(|p| p.time).collect(),
        joined.pairs.iter().map(|p| p.event).collect(),
        joined
            .pairs
            .iter()
            .zip(&capra_pairs)
            .map(|(d, c)| vec![d.score, c.score])
            .collect(),
        vec!["dlrs".into(), "capra_s".into()],
    )?;
    let fit = cox::fit(&data)?;
    if !fit.converged {
        log::warn!(
            "Cox fit stopped after {} iterations without converging",
            fit.iterations
        );
    }
    let lp = data.linear_predictor(&fit.coefficients);
    let joint_pairs: Vec<OutcomePair> = joined
        .pairs
        .iter()
        .zip(&lp)
        .map(|(p, &eta)| OutcomePair::new(p.time, p.event, eta))
        .collect();
    let bs = cfg.bootstrap_config();
    let report = CoxReport {
        provenance: Provenance::new("cox", cfg),
        n: data.len(),
        events: data.events.iter().filter(|e| **e).count(),
        dlrs: bootstrap_ci(&joined.pairs, &bs)?.into(),
        capra: bootstrap_ci(&capra_pairs, &bs)?.into(),
        joint: bootstrap_ci(&joint_pairs, &bs)?.into(),
        covariates: (0..fit.names.len())
            .map(|j| CovariateRow {
                name: fit.names[j].clone(),
                coefficient: fit.coefficients[j],
                hazard_ratio: fit.hazard_ratios[j],
                ci_lower: fit.ci_lower[j],
                ci_upper: fit.ci_upper[j],
                p_value: fit.p_values[j],
            })
            .collect(),
        log_likelihood: fit.log_likelihood,
        iterations: fit.iterations,
        converged: fit.converged,
    };
    io::write_json(out, &report)
}

pub fn cmd_split(cfg: &RunConfig, cohort: &Path, out: Option<&Path>) -> CliResult<()> {
    let rows = io::read_cohort(cohort)?;
    let labels = rows
        .iter()
        .map(|row| {
            let r = &row.value;
            let at = |what: &str| CliError::data(format!("line {} ({}): {what}", row.line, r.patient_id));
            let event = r.event.ok_or_else(|| at("event is required"))? == 1;
            let isup = match (r.isup, r.gleason_primary, r.gleason_secondary) {
                (Some(g), _, _) => g,
                (None, Some(p), Some(s)) => isup_grade(p, s),
                _ => return Err(at("isup or Gleason patterns are required")),
            };
            let year = r.surgery_year.ok_or_else(|| at("surgery_year is required"))?;
            StratumLabels::new(event, isup, year).map_err(|e| at(&e.to_string()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let assignment = stratified_kfold(&labels, cfg.folds, cfg.seed)?;
    let mut w = csv_out(out, &Provenance::new("split", cfg))?;
    w.write_record(["patient_id", "fold"]).map_err(csv_err)?;
    for (row, f) in rows.iter().zip(&assignment.folds) {
        w.write_record([row.value.patient_id.as_str(), &f.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    for (f, n) in assignment.fold_sizes.iter().enumerate() {
        log::info!("fold {f}: {n} patients");
    }
    Ok(())
}

/// Slides of one patient for tile planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub patient_id: String,
    /// Overrides the configured mask downsample.
    #[serde(default)]
    pub mask_downsample: Option<u32>,
    pub slides: Vec<SlideEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    /// Native spacings (microns per pixel) of the slide's pyramid levels.
    pub spacings: Vec<f64>,
    /// Tissue mask, relative to the manifest.
    pub mask: PathBuf,
    /// Tissue crops in mask pixels; the whole mask when omitted.
    #[serde(default)]
    pub crops: Vec<Rect>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlacedCrop {
    pub slide_id: String,
    pub source: Rect,
    pub placed: Rect,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TilePlanReport {
    pub provenance: Provenance,
    pub patient_id: String,
    pub mask_downsample: u32,
    pub crops: Vec<PlacedCrop>,
    pub region_count: usize,
    pub tile_count: usize,
    pub kept_tile_count: usize,
    pub plan: tiling::TilePlan,
}

pub fn cmd_tileplan(
    cfg: &RunConfig,
    manifest_path: &Path,
    canvas_mask: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let manifest: SlideManifest = io::read_json(manifest_path)?;
    if manifest.slides.is_empty() {
        return Err(io_err(manifest_path, "no slides"));
    }
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut choice = None;
    let mut crops = vec![];
    for s in &manifest.slides {
        let c = tiling::choose_spacing(&cfg.spacing, &s.spacings)
            .map_err(|e| CliError::from(e).context(&s.slide_id))?;
        match choice {
            None => choice = Some(c),
            Some(prev) if prev != c => {
                return Err(CliError::data(format!(
                    "slide {} reads regions at {} mpp, others at {} mpp",
                    s.slide_id, c.native_mpp, prev.native_mpp
                )))
            }
            _ => {}
        }
        let mask = io::read_mask(&base.join(&s.mask))?;
        let boxes = if s.crops.is_empty() {
            vec![Rect::new(0, 0, mask.width(), mask.height())]
        } else {
            s.crops.clone()
        };
        for b in boxes {
            if b.x + b.width > mask.width() || b.y + b.height > mask.height() {
                return Err(CliError::data(format!(
                    "slide {}: crop {:?} exceeds the {}x{} mask",
                    s.slide_id,
                    b,
                    mask.width(),
                    mask.height()
                )));
            }
            let local = tiling::Mask::from_fn(b.width, b.height, |x, y| mask.get(b.x + x, b.y + y));
            crops.push(TissueCrop::new(s.slide_id.clone(), b, c.native_mpp, local)?);
        }
    }
    let choice = choice.expect("at least one slide");
    let packing = tiling::pack(&crops, None)?;
    let canvas = tiling::compose_mask(&crops, &packing)?;
    let plan_cfg = tiling::PlanConfig {
        mask_downsample: manifest.mask_downsample.unwrap_or(cfg.plan.mask_downsample),
        ..cfg.plan
    };
    let plan = tiling::plan_tiles(&canvas, &choice, &plan_cfg)?;
    if let Some(p) = canvas_mask {
        io::write_mask(p, &canvas)?;
    }
    let report = TilePlanReport {
        provenance: Provenance::new("tileplan", cfg),
        patient_id: manifest.patient_id,
        mask_downsample: plan_cfg.mask_downsample,
        crops: packing
            .placements
            .iter()
            .map(|p| PlacedCrop {
                slide_id: crops[p.crop].slide_id.clone(),
                source: crops[p.crop].bbox,
                placed: p.rect,
            })
            .collect(),
        region_count: plan.regions.len(),
        tile_count: plan.tile_count(),
        kept_tile_count: plan.kept_tile_count(),
        plan,
    };
    io::write_json(out, &report)
}

/// A trained aggregator with the time bins its labels were built on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub provenance: Provenance,
    pub bin_edges: Vec<f64>,
    pub params: AggregatorParams,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub tuning_loss: Vec<f64>,
    pub tuning_cindex: Option<f64>,
    pub train_patients: Vec<String>,
    pub tuning_patients: Vec<String>,
}

fn read_folds(path: &Path) -> CliResult<BTreeMap<String, usize>> {
    let t = Table::read(path)?;
    let col = t
        .column("fold")
        .ok_or_else(|| io_err(path, "missing fold column"))?;
    t.rows
        .iter()
        .map(|(id, r)| {
            r[col]
                .parse::<usize>()
                .map(|f| (id.clone(), f))
                .map_err(|e| io_err(path, format!("patient {id}: {e}")))
        })
        .collect()
}

pub fn cmd_train(
    cfg: &RunConfig,
    bags_path: &Path,
    outcomes: &Path,
    holdout: Option<(&Path, usize)>,
    out: Option<&Path>,
) -> CliResult<()> {
    let bags = io::read_bags(bags_path)?;
    let outcome = io::outcomes(&io::read_cohort(outcomes)?)?;
    let folds = holdout.map(|(p, _)| read_folds(p)).transpose()?;
    let mut used: Vec<(String, FeatureBag, f64, bool)> = vec![];
    for (id, bag) in bags {
        let (t, e) = *outcome
            .get(&id)
            .ok_or_else(|| CliError::data(format!("patient {id} has no outcome")))?;
        if let (Some(f), Some((_, test))) = (&folds, holdout) {
            let fold = *f
                .get(&id)
                .ok_or_else(|| CliError::data(format!("patient {id} has no fold")))?;
            if fold == test {
                continue;
            }
        }
        used.push((id, bag, t, e));
    }
    if used.is_empty() {
        return Err(CliError::data("no training patients left"));
    }
    let event_times: Vec<f64> = used.iter().filter(|u| u.3).map(|u| u.2).collect();
    let bins = make_bins(&event_times)?;
    let dataset: Vec<LabelledBag> = used.iter().map(|u| (u.1.clone(), bins.label(u.2, u.3))).collect();
    let tc = cfg.train_config();
    let report = mil::train(&dataset, &tc)?;
    let tuning_cindex = if report.tuning_indices.is_empty() {
        None
    } else {
        let b: Vec<&FeatureBag> = report.tuning_indices.iter().map(|&i| &used[i].1).collect();
        let t: Vec<f64> = report.tuning_indices.iter().map(|&i| used[i].2).collect();
        let e: Vec<bool> = report.tuning_indices.iter().map(|&i| used[i].3).collect();
        mil::cindex_on(&b, &t, &e, &report.params).ok()
    };
    let names = |idx: &[usize]| idx.iter().map(|&i| used[i].0.clone()).collect::<Vec<_>>();
    let model = ModelFile {
        provenance: Provenance::new("train", cfg),
        bin_edges: bins.edges().to_vec(),
        params: report.params,
        best_epoch: report.best_epoch,
        epochs_run: report.epochs_run,
        tuning_cindex,
        train_patients: names(&report.train_indices),
        tuning_patients: names(&report.tuning_indices),
        train_loss: report.train_loss,
        tuning_loss: report.tuning_loss,
    };
    log::info!(
        "trained {} epochs, best {}, tuning c-index {:?}",
        model.epochs_run,
        model.best_epoch,
        model.tuning_cindex
    );
    io::write_json(out, &model)
}

/// Mean risk over several trained models.
pub struct Ensemble(pub Vec<AggregatorParams>);

impl RiskModel for Ensemble {
    fn risk(&self, bag: &FeatureBag) -> bcrisk::Result<f64> {
        let per = self
            .0
            .iter()
            .map(|p| mil::predict_risk(bag, p))
            .collect::<bcrisk::Result<Vec<RiskScore>>>()?;
        Ok(ensemble_risk(&per)?.0)
    }
}

fn load_ensemble(paths: &[PathBuf]) -> CliResult<Ensemble> {
    let models = paths
        .iter()
        .map(|p| {
            let m: ModelFile = io::read_json(p)?;
            TimeBins::from_edges(
                m.bin_edges
                    .as_slice()
                    .try_into()
                    .map_err(|_| io_err(p, "bin_edges must hold 5 values"))?,
            )
            .map_err(|e| io_err(p, e))?;
            Ok(m.params)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Ensemble(models))
}

pub fn cmd_predict(
    cfg: &RunConfig,
    bags_path: &Path,
    models: &[PathBuf],
    out: Option<&Path>,
) -> CliResult<()> {
    let ensemble = load_ensemble(models)?;
    let bags = io::read_bags(bags_path)?;
    let mut w = csv_out(out, &Provenance::new("predict", cfg))?;
    w.write_record(["patient_id", "risk"]).map_err(csv_err)?;
    for (id, bag) in &bags {
        let r = ensemble.risk(bag).map_err(|e| CliError::from(e).context(id))?;
        w.write_record([id.as_str(), &fmt_f(r)]).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn cmd_occlude(
    cfg: &RunConfig,
    bags_path: &Path,
    models: &[PathBuf],
    out: Option<&Path>,
) -> CliResult<()> {
    let ensemble = load_ensemble(models)?;
    let bags = io::read_bags(bags_path)?;
    let mut per_patient = vec![];
    for (id, bag) in &bags {
        let occ = occlusion_scores(bag, &ensemble, cfg.top_k).map_err(|e| CliError::from(e).context(id))?;
        per_patient.push((id, occ));
    }
    let all_raw: Vec<f64> = per_patient
        .iter()
        .flat_map(|(_, o)| o.scores.iter().map(|s| s.raw))
        .collect();
    let normalized = normalize_contributions(&all_raw)?;
    let mut w = csv_out(out, &Provenance::new("occlude", cfg))?;
    w.write_record([
        "patient_id",
        "tile",
        "region",
        "tile_in_region",
        "raw",
        "clipped",
        "normalized",
        "selected",
    ])
    .map_err(csv_err)?;
    let mut k = 0;
    for (id, occ) in &per_patient {
        for s in &occ.scores {
            let n = normalized[k];
            k += 1;
            let selected = if occ.top_positive.contains(&s.tile) {
                "positive"
            } else if occ.top_negative.contains(&s.tile) {
                "negative"
            } else {
                ""
            };
            w.write_record([
                id.as_str(),
                &s.tile.to_string(),
                &s.region.to_string(),
                &s.tile_in_region.to_string(),
                &fmt_f(s.raw),
                &fmt_f(n.clipped),
                &fmt_f(n.normalized),
                selected,
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionReport {
    pub provenance: Provenance,
    pub width: usize,
    pub height: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub threshold: f64,
    /// Min-max normalized factorized attention, row-major.
    pub factorized: Vec<f64>,
    /// Smoothed and thresholded scores, row-major.
    pub scores: Vec<f64>,
}

pub fn cmd_attention(
    cfg: &RunConfig,
    trained: &[PathBuf],
    frozen: &[PathBuf],
    gamma: f64,
    grid: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    if trained.is_empty() && frozen.is_empty() {
        return Err(CliError::Usage(
            "give at least one --trained or --frozen raster".into(),
        ));
    }
    let mut rasters = vec![];
    let mut flags = vec![];
    for (paths, is_frozen) in [(trained, false), (frozen, true)] {
        for p in paths {
            rasters.push(io::read_raster(p)?);
            flags.push(is_frozen);
        }
    }
    let stack = AttentionStack::new(rasters, flags, gamma)?;
    let fac = factorized_attention(&stack);
    let hm = render_heatmap(&fac, &cfg.heatmap);
    io::write_rgba(out, fac.width, fac.height, &hm.rgba)?;
    if let Some(g) = grid {
        io::write_json(
            Some(g),
            &AttentionReport {
                provenance: Provenance::new("attention", cfg),
                width: fac.width,
                height: fac.height,
                gamma,
                sigma: cfg.heatmap.sigma,
                threshold: cfg.heatmap.threshold,
                factorized: fac.data,
                scores: hm.scores.data,
            },
        )?;
    }
    Ok(())
}

fn opt_flag(v: Option<bool>) -> String {
    v.map_or_else(String::new, |b| u8::from(b).to_string())
}

pub fn cmd_synth_cohort(
    cfg: &RunConfig,
    patients: usize,
    missing_rate: f64,
    dlrs_out: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cc = CohortConfig {
        patients,
        missing_rate,
        ..Default::default()
    };
    let cohort = synth::synthetic_cohort(&cc, cfg.seed)?;
    let prov = Provenance::new("synth-cohort", cfg);
    let mut w = csv_out(out, &prov)?;
    w.write_record(COHORT_COLUMNS).map_err(csv_err)?;
    for p in &cohort {
        let r = &p.record;
        let (gp, gs) = r.gleason.map_or((String::new(), String::new()), |(a, b)| {
            (a.to_string(), b.to_string())
        });
        w.write_record([
            r.patient_id.clone(),
            fmt_f(p.time_months),
            u8::from(p.event).to_string(),
            r.psa.map_or_else(String::new, fmt_f),
            gp,
            gs,
            r.pt_stage.map_or_else(String::new, |s| format!("p{s}")),
            r.pn_positive
                .map_or_else(String::new, |n| if n { "pN1" } else { "pN0" }.into()),
            opt_flag(r.surgical_margin),
            opt_flag(r.ece),
            opt_flag(r.svi),
            opt_flag(r.lni),
            p.isup.to_string(),
            p.surgery_year.to_string(),
            "8".into(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    if let Some(path) = dlrs_out {
        let mut w = csv_out(Some(path), &prov)?;
        w.write_record(["patient_id", "dlrs"]).map_err(csv_err)?;
        for p in &cohort {
            w.write_record([p.record.patient_id.as_str(), &fmt_f(p.dlrs)])
                .map_err(csv_err)?;
        }
        w.flush().map_err(csv_err)?;
    }
    Ok(())
}

pub fn cmd_synth_bags(cfg: &RunConfig, dir: &Path, patients: usize, dim: usize) -> CliResult<()> {
    let pc = PlantedBagConfig {
        patients,
        dim,
        ..Default::default()
    };
    let data = synth::planted_bags(&pc, cfg.seed)?;
    let regions_dir = dir.join("regions");
    std::fs::create_dir_all(&regions_dir).map_err(|e| io_err(&regions_dir, e))?;
    let mut entries = vec![];
    for (i, bag) in data.bags.iter().enumerate() {
        let id = format!("B{:04}", i + 1);
        let mut files = vec![];
        for (m, r) in bag.regions().iter().enumerate() {
            let rel = PathBuf::from("regions").join(format!("{id}_r{m}.csv"));
            let flat: Vec<f64> = (0..r.rows()).flat_map(|t| r.row(t, dim).to_vec()).collect();
            io::write_region(&dir.join(&rel), &flat, dim)?;
            files.push(rel);
        }
        entries.push(BagEntry {
            patient_id: id,
            regions: files,
        });
    }
    let prov = Provenance::new("synth-bags", cfg);
    let mut w = csv_out(Some(&dir.join("cohort.csv")), &prov)?;
    w.write_record(["patient_id", "time_months", "event"])
        .map_err(csv_err)?;
    for (e, (t, ev)) in entries.iter().zip(data.times.iter().zip(&data.events)) {
        w.write_record([e.patient_id.as_str(), &fmt_f(*t), if *ev { "1" } else { "0" }])
            .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    io::write_json(
        Some(&dir.join("bags.json")),
        &BagManifest {
            dim,
            patients: entries,
        },
    )
}
