//! File formats.
//!
//! CSV inputs may carry `#` comment lines (the provenance header of a
//! previous run) and are matched on column names, not positions.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bcrisk::capra::{parse_pn, AjccEdition, ClinRecord, PtStage};
use bcrisk::interpret::Raster;
use bcrisk::mil::{FeatureBag, TILES_PER_REGION};
use bcrisk::tiling::Mask;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))
}

/// Writer to a file, or to stdout when no path is given.
pub fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            Box::new(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?))
        }
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::data(e.to_string()))?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::data(e.to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// One row of a cohort file. Every column except `patient_id` is optional;
/// commands check for the ones they need.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: String,
    #[serde(default)]
    pub time_months: Option<f64>,
    #[serde(default)]
    pub event: Option<u8>,
    #[serde(default)]
    pub psa: Option<f64>,
    #[serde(default)]
    pub gleason_primary: Option<u8>,
    #[serde(default)]
    pub gleason_secondary: Option<u8>,
    #[serde(default)]
    pub pt_stage: Option<String>,
    #[serde(default)]
    pub pn_stage: Option<String>,
    #[serde(default)]
    pub sm: Option<u8>,
    #[serde(default)]
    pub ece: Option<u8>,
    #[serde(default)]
    pub svi: Option<u8>,
    #[serde(default)]
    pub lni: Option<u8>,
    #[serde(default)]
    pub isup: Option<u8>,
    #[serde(default)]
    pub surgery_year: Option<i32>,
    #[serde(default)]
    pub ajcc_edition: Option<String>,
}

pub const COHORT_COLUMNS: [&str; 15] = [
    "patient_id",
    "time_months",
    "event",
    "psa",
    "gleason_primary",
    "gleason_secondary",
    "pt_stage",
    "pn_stage",
    "sm",
    "ece",
    "svi",
    "lni",
    "isup",
    "surgery_year",
    "ajcc_edition",
];

/// A cohort row with the file line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    pub line: u64,
    pub value: T,
}

fn flag(v: Option<u8>, name: &str, line: u64) -> CliResult<Option<bool>> {
    match v {
        None => Ok(None),
        Some(0) => Ok(Some(false)),
        Some(1) => Ok(Some(true)),
        Some(x) => Err(CliError::data(format!(
            "line {line}: {name} must be 0 or 1, got {x}"
        ))),
    }
}

pub fn read_cohort(path: &Path) -> CliResult<Vec<Located<CohortRow>>> {
    let mut rdr = csv_reader(path)?;
    let mut rows = vec![];
    let mut seen = HashSet::new();
    let mut record = csv::StringRecord::new();
    let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if !headers.iter().any(|h| h == "patient_id") {
        return Err(io_err(path, "missing patient_id column"));
    }
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(io_err(path, e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        let row: CohortRow = record
            .deserialize(Some(&headers))
            .map_err(|e| io_err(path, format!("line {line}: {e}")))?;
        if row.patient_id.is_empty() {
            return Err(io_err(path, format!("line {line}: empty patient_id")));
        }
        if !seen.insert(row.patient_id.clone()) {
            return Err(io_err(
                path,
                format!("line {line}: duplicate patient_id {}", row.patient_id),
            ));
        }
        if let Some(t) = row.time_months {
            if !(t > 0.0 && t.is_finite()) {
                return Err(io_err(
                    path,
                    format!("line {line}: time_months must be > 0, got {t}"),
                ));
            }
        }
        flag(row.event, "event", line).map_err(|e| e.context(path.display()))?;
        rows.push(Located { line, value: row });
    }
    if rows.is_empty() {
        return Err(io_err(path, "no records"));
    }
    Ok(rows)
}

/// Converts a cohort row into CAPRA-S inputs, naming the row on failure.
pub fn clin_record(row: &Located<CohortRow>) -> CliResult<ClinRecord> {
    let r = &row.value;
    let at = |e: bcrisk::Error| CliError::data(format!("line {} ({}): {e}", row.line, r.patient_id));
    let gleason = match (r.gleason_primary, r.gleason_secondary) {
        (Some(p), Some(s)) => Some((p, s)),
        (None, None) => None,
        _ => {
            return Err(CliError::data(format!(
                "line {} ({}): Gleason primary and secondary must both be given or both be empty",
                row.line, r.patient_id
            )))
        }
    };
    let rec = ClinRecord {
        patient_id: r.patient_id.clone(),
        psa: r.psa,
        gleason,
        surgical_margin: flag(r.sm, "sm", row.line)?,
        ece: flag(r.ece, "ece", row.line)?,
        svi: flag(r.svi, "svi", row.line)?,
        lni: flag(r.lni, "lni", row.line)?,
        pt_stage: PtStage::parse(r.pt_stage.as_deref().unwrap_or("")).map_err(at)?,
        pn_positive: parse_pn(r.pn_stage.as_deref().unwrap_or("")).map_err(at)?,
        edition: r
            .ajcc_edition
            .as_deref()
            .unwrap_or("")
            .parse::<AjccEdition>()
            .map_err(at)?,
        ..Default::default()
    };
    rec.validate().map_err(at)?;
    Ok(rec)
}

/// Survival outcome of each patient, keyed by id.
pub fn outcomes(rows: &[Located<CohortRow>]) -> CliResult<BTreeMap<String, (f64, bool)>> {
    rows.iter()
        .map(|row| {
            let r = &row.value;
            match (r.time_months, r.event) {
                (Some(t), Some(e)) => Ok((r.patient_id.clone(), (t, e == 1))),
                _ => Err(CliError::data(format!(
                    "line {} ({}): time_months and event are required",
                    row.line, r.patient_id
                ))),
            }
        })
        .collect()
}

/// A table of string columns keyed by patient id.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: BTreeMap<String, Vec<String>>,
    /// Ids in file order.
    pub order: Vec<String>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut rdr = csv_reader(path)?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| io_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let id_col = headers
            .iter()
            .position(|h| h == "patient_id")
            .ok_or_else(|| io_err(path, "missing patient_id column"))?;
        let mut rows = BTreeMap::new();
        let mut order = vec![];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| io_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let id = rec[id_col].to_string();
            if rows
                .insert(id.clone(), rec.iter().map(str::to_string).collect())
                .is_some()
            {
                return Err(io_err(path, format!("line {line}: duplicate patient_id {id}")));
            }
            order.push(id);
        }
        if rows.is_empty() {
            return Err(io_err(path, "no records"));
        }
        Ok(Self { headers, rows, order })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// The named column, or the only column besides `patient_id`.
    pub fn score_column(&self, name: Option<&str>, path: &Path) -> CliResult<usize> {
        match name {
            Some(n) => self
                .column(n)
                .ok_or_else(|| io_err(path, format!("no column named {n}"))),
            None => {
                let others: Vec<usize> = (0..self.headers.len())
                    .filter(|&i| self.headers[i] != "patient_id")
                    .collect();
                match others.as_slice() {
                    [one] => Ok(*one),
                    _ if self.column("risk").is_some() => Ok(self.column("risk").unwrap()),
                    _ => Err(CliError::Usage(format!(
                        "{}: several score columns; pick one with --score-column",
                        path.display()
                    ))),
                }
            }
        }
    }

    pub fn numeric(&self, col: usize, path: &Path) -> CliResult<BTreeMap<String, f64>> {
        self.rows
            .iter()
            .map(|(id, r)| {
                r[col]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(|v| (id.clone(), v))
                    .ok_or_else(|| {
                        io_err(
                            path,
                            format!(
                                "patient {id}: {} is not a number: `{}`",
                                self.headers[col], r[col]
                            ),
                        )
                    })
            })
            .collect()
    }
}

/// Bag manifest: feature dimension and, per patient, region CSV paths
/// relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagManifest {
    pub dim: usize,
    pub patients: Vec<BagEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub patient_id: String,
    pub regions: Vec<PathBuf>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a region file: 64 rows of `dim` comma-separated numbers, no header.
pub fn read_region(path: &Path, dim: usize) -> CliResult<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let mut data = Vec::with_capacity(TILES_PER_REGION * dim);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != dim {
            return Err(io_err(
                path,
                format!("row {} has {} values, expected {dim}", rows + 1, rec.len()),
            ));
        }
        for v in rec.iter() {
            data.push(
                v.parse::<f64>()
                    .map_err(|e| io_err(path, format!("row {}: {e}", rows + 1)))?,
            );
        }
        rows += 1;
    }
    if rows != TILES_PER_REGION {
        return Err(io_err(
            path,
            format!("{rows} tile rows, expected {TILES_PER_REGION}"),
        ));
    }
    Ok(data)
}

pub fn read_bags(manifest_path: &Path) -> CliResult<Vec<(String, FeatureBag)>> {
    let manifest: BagManifest = read_json(manifest_path)?;
    let base = base_dir(manifest_path);
    manifest
        .patients
        .iter()
        .map(|p| {
            let regions = p
                .regions
                .iter()
                .map(|r| read_region(&base.join(r), manifest.dim))
                .collect::<CliResult<Vec<_>>>()?;
            let bag = FeatureBag::new(manifest.dim, regions)
                .map_err(|e| CliError::from(e).context(&p.patient_id))?;
            Ok((p.patient_id.clone(), bag))
        })
        .collect()
}

pub fn write_region(path: &Path, data: &[f64], dim: usize) -> CliResult<()> {
    let mut out = output(Some(path))?;
    for row in data.chunks(dim) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Binary mask from a grayscale PGM/PNG: pixels >= 128 are tissue.
pub fn read_mask(path: &Path) -> CliResult<Mask> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::new(w, h, img.pixels().map(|p| p.0[0] >= 128).collect()).map_err(CliError::from)
}

pub fn write_mask(path: &Path, mask: &Mask) -> CliResult<()> {
    let img = image::GrayImage::from_fn(mask.width(), mask.height(), |x, y| {
        image::Luma([if mask.get(x, y) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| io_err(path, e))
}

/// Grayscale image as values in [0, 1].
pub fn read_raster(path: &Path) -> CliResult<Raster> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Raster::new(
        w as usize,
        h as usize,
        img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(),
    )
    .map_err(CliError::from)
}

pub fn write_rgba(path: &Path, width: usize, height: usize, rgba: &[[u8; 4]]) -> CliResult<()> {
    let buf: Vec<u8> = rgba.iter().flatten().copied().collect();
    let img = image::RgbaImage::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| CliError::data("heatmap buffer size mismatch"))?;
    img.save(path).map_err(|e| io_err(path, e))
}
