//! File formats: manifests, covariates, matrices and model files.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use slacc::symmetric::{unvectorize, vectorize};
use slacc::{ConnectivityDataset, DatasetOptions, DesignSpec, DiagonalMode, FitConfig, ParameterSet};

use crate::error::{CliError, CliResult};

/// Ordering tag written to vectorized sidecars.
pub const ROW_MAJOR_UPPER: &str = "row_major_upper";

/// Full-precision decimal text for a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &str) -> CliResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| CliError::input(format!("{what}: cannot parse '{s}' as a number")))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub matrix_path: Option<PathBuf>,
    pub site: String,
}

/// Subjects in file order. Matrix paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn read(path: &Path, need_paths: bool) -> CliResult<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::input(format!("manifest {}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let id_col = col("subject_id").ok_or_else(|| CliError::input("manifest lacks a subject_id column"))?;
        let site_col = col("site").ok_or_else(|| CliError::input("manifest lacks a site column"))?;
        let path_col = col("matrix_path");
        if need_paths && path_col.is_none() {
            return Err(CliError::input("manifest lacks a matrix_path column"));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let subject_id = rec.get(id_col).unwrap_or("").to_string();
            if subject_id.is_empty() {
                return Err(CliError::input("manifest row with an empty subject_id"));
            }
            if !seen.insert(subject_id.clone()) {
                return Err(CliError::subject(format!("duplicate subject_id '{subject_id}'"), &subject_id));
            }
            let site = rec.get(site_col).unwrap_or("").to_string();
            if site.is_empty() {
                return Err(CliError::subject(format!("subject '{subject_id}' has no site"), &subject_id));
            }
            let matrix_path = path_col.and_then(|c| rec.get(c)).filter(|p| !p.is_empty()).map(|p| base.join(p));
            if need_paths && matrix_path.is_none() {
                return Err(CliError::subject(format!("subject '{subject_id}' has no matrix_path"), &subject_id));
            }
            rows.push(ManifestRow {
                subject_id,
                matrix_path,
                site,
            });
        }
        if rows.is_empty() {
            return Err(CliError::input("manifest has no subjects"));
        }
        Ok(Self { rows })
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn site_labels(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.site.clone()).collect()
    }

    pub fn write(path: &Path, ids: &[String], paths: Option<&[String]>, sites: &[String]) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)?;
        match paths {
            Some(p) => {
                w.write_record(["subject_id", "matrix_path", "site"])?;
                for ((id, mp), s) in ids.iter().zip(p).zip(sites) {
                    w.write_record([id, mp, s])?;
                }
            }
            None => {
                w.write_record(["subject_id", "site"])?;
                for (id, s) in ids.iter().zip(sites) {
                    w.write_record([id, s])?;
                }
            }
        }
        w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }
}

/// Site labels in first-appearance order and the zero-based index of each subject.
pub fn index_sites(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut order: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let idx = labels
        .iter()
        .map(|s| {
            *lookup.entry(s.clone()).or_insert_with(|| {
                order.push(s.clone());
                order.len() - 1
            })
        })
        .collect();
    (idx, order)
}

/// Maps labels onto an existing site list, naming the first unknown one.
pub fn map_sites(labels: &[String], known: &[String]) -> CliResult<Vec<usize>> {
    labels
        .iter()
        .map(|s| {
            known
                .iter()
                .position(|k| k == s)
                .ok_or_else(|| CliError::site(format!("site '{s}' was not seen during fitting"), s))
        })
        .collect()
}

/// Biological covariates joined to `ids`, with their column names.
pub fn read_covariates(path: &Path, ids: &[String]) -> CliResult<(DMatrix<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("covariates {}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "subject_id")
        .ok_or_else(|| CliError::input("covariates lack a subject_id column"))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != id_col)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(id_col).unwrap_or("").to_string();
        let mut vals = Vec::with_capacity(names.len());
        for (c, field) in rec.iter().enumerate() {
            if c != id_col {
                vals.push(parse_f64(field, &format!("covariates for '{id}'"))?);
            }
        }
        if rows.insert(id.clone(), vals).is_some() {
            return Err(CliError::subject(format!("duplicate covariate row for '{id}'"), &id));
        }
    }
    let mut x = DMatrix::zeros(ids.len(), names.len());
    for (j, id) in ids.iter().enumerate() {
        let vals = rows
            .get(id)
            .ok_or_else(|| CliError::subject(format!("no covariate row for subject '{id}'"), id))?;
        for (c, v) in vals.iter().enumerate() {
            x[(j, c)] = *v;
        }
    }
    Ok((x, names))
}

pub fn write_covariates(path: &Path, ids: &[String], names: &[String], x: &DMatrix<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (j, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend((0..names.len()).map(|c| fmt_f64(x[(j, c)])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Headerless numeric CSV.
pub fn read_numeric_csv(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| parse_f64(f, &path.display().to_string()))
            .collect::<CliResult<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_numeric_csv<'a>(path: &Path, rows: impl Iterator<Item = Vec<f64>> + 'a) -> CliResult<()> {
    let mut text = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|&x| fmt_f64(x)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let rows = read_numeric_csv(path)?;
    let v = rows.len();
    if v == 0 || rows.iter().any(|r| r.len() != v) {
        return Err(CliError::input(format!("{}: expected a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(v, v, |r, c| rows[r][c]))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    write_numeric_csv(path, (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()))
}

/// Metadata that accompanies a vectorized matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(rename = "V")]
    pub v: usize,
    pub diagonal_mode: DiagonalMode,
    pub ordering: String,
}

/// `data.csv` pairs with `data.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_vectorized(path: &Path) -> CliResult<(Vec<DMatrix<f64>>, Sidecar)> {
    let side_path = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&read_text(&side_path)?)
        .map_err(|e| CliError::input(format!("sidecar {}: {e}", side_path.display())))?;
    if sidecar.ordering != ROW_MAJOR_UPPER {
        return Err(CliError::input(format!(
            "sidecar ordering '{}' is not supported; expected '{ROW_MAJOR_UPPER}'",
            sidecar.ordering
        )));
    }
    let p = sidecar.diagonal_mode.p(sidecar.v);
    let rows = read_numeric_csv(path)?;
    let mut mats = Vec::with_capacity(rows.len());
    for (k, row) in rows.into_iter().enumerate() {
        if row.len() != p {
            return Err(CliError::input(format!(
                "{} row {}: expected {p} values, found {}",
                path.display(),
                k + 1,
                row.len()
            )));
        }
        mats.push(unvectorize(&DVector::from_vec(row), sidecar.v, sidecar.diagonal_mode)?);
    }
    Ok((mats, sidecar))
}

pub fn write_vectorized(path: &Path, mats: &[DMatrix<f64>], mode: DiagonalMode) -> CliResult<()> {
    let v = mats.first().map_or(0, |m| m.nrows());
    let rows = mats
        .iter()
        .map(|m| vectorize(m, mode).map(|y| y.as_slice().to_vec()))
        .collect::<slacc::Result<Vec<_>>>()?;
    write_numeric_csv(path, rows.into_iter())?;
    let sidecar = Sidecar {
        v,
        diagonal_mode: mode,
        ordering: ROW_MAJOR_UPPER.into(),
    };
    write_text(&sidecar_path(path), &serde_json::to_string_pretty(&sidecar)?)
}

/// How subject matrices are stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSource {
    /// One `V x V` file per subject, listed in the manifest.
    PerSubject,
    /// One vectorized file with a JSON sidecar.
    Vectorized(PathBuf),
}

/// A dataset read from disk together with the labels needed to write results back.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: ConnectivityDataset,
    pub subject_ids: Vec<String>,
    pub site_labels: Vec<String>,
    /// Sites in index order.
    pub sites: Vec<String>,
    pub covariate_names: Vec<String>,
    pub design: DesignSpec,
}

/// What the caller knows before reading.
pub struct LoadRequest<'a> {
    pub manifest: &'a Path,
    pub covariates: &'a Path,
    pub source: MatrixSource,
    /// Diagonal mode for per-subject files.
    pub mode: DiagonalMode,
    /// Site list of a fitted model; new labels are then an error.
    pub known_sites: Option<&'a [String]>,
}

/// Reads matrices, joins covariates and appends one indicator per site.
pub fn load_dataset(req: &LoadRequest<'_>) -> CliResult<LoadedData> {
    let manifest = Manifest::read(req.manifest, req.source == MatrixSource::PerSubject)?;
    let ids = manifest.subject_ids();
    let labels = manifest.site_labels();
    let (site_idx, sites) = match req.known_sites {
        Some(known) => (map_sites(&labels, known)?, known.to_vec()),
        None => index_sites(&labels),
    };
    let (bio, names) = read_covariates(req.covariates, &ids)?;
    let (matrices, mode) = match &req.source {
        MatrixSource::PerSubject => {
            let mut mats = Vec::with_capacity(ids.len());
            for row in &manifest.rows {
                let path = row.matrix_path.as_ref().expect("checked by Manifest::read");
                let m = read_matrix(path).map_err(|e| CliError::subject(format!("subject '{}': {e}", row.subject_id), &row.subject_id))?;
                mats.push(m);
            }
            (mats, req.mode)
        }
        MatrixSource::Vectorized(path) => {
            let (mats, sidecar) = read_vectorized(path)?;
            if mats.len() != ids.len() {
                return Err(CliError::input(format!(
                    "{} has {} rows but the manifest lists {} subjects",
                    path.display(),
                    mats.len(),
                    ids.len()
                )));
            }
            (mats, sidecar.diagonal_mode)
        }
    };
    if let Some(bad) = matrices.iter().position(|m| m.nrows() != matrices[0].nrows()) {
        return Err(CliError::subject(
            format!("subject '{}' has a matrix of a different size", ids[bad]),
            &ids[bad],
        ));
    }
    let m = sites.len();
    let q_bio = bio.ncols();
    let mut x = DMatrix::zeros(ids.len(), q_bio + m);
    x.columns_mut(0, q_bio).copy_from(&bio);
    for (j, &s) in site_idx.iter().enumerate() {
        x[(j, q_bio + s)] = 1.0;
    }
    let options = DatasetOptions {
        symmetrize_all: false,
        n_sites: Some(m),
    };
    let data = ConnectivityDataset::with_options(matrices, site_idx, x, mode, options).map_err(|e| match e {
        slacc::SlaccError::NotSymmetric { .. } | slacc::SlaccError::NotSquare { .. } => {
            CliError::input(format!("matrix check failed: {e}"))
        }
        other => other.into(),
    })?;
    log::info!(
        "read {} subjects, V = {}, {} sites, {} covariates, diagonal {}",
        data.n(),
        data.v(),
        m,
        q_bio,
        mode_name(mode)
    );
    Ok(LoadedData {
        data,
        subject_ids: ids,
        site_labels: labels,
        sites,
        covariate_names: names,
        design: DesignSpec::one_hot(q_bio, m),
    })
}

pub fn mode_name(mode: DiagonalMode) -> &'static str {
    match mode {
        DiagonalMode::Include => "include",
        DiagonalMode::Exclude => "exclude",
    }
}

/// Summary of a fit's iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub converged: bool,
    pub final_delta_u: f64,
    pub admm_not_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: FitConfig,
    pub nll_scaled: f64,
    pub nll_total: f64,
    pub tau: f64,
    pub lambda_max: f64,
    pub trace: TraceSummary,
}

/// Everything needed to reuse a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub theta: ParameterSet,
    pub design: DesignSpec,
    pub sigma_h: DVector<f64>,
    pub phi_h: f64,
    pub site_labels: Vec<String>,
    pub site_sizes: Vec<usize>,
    pub covariate_names: Vec<String>,
    pub diagonal_mode: DiagonalMode,
    pub metadata: ModelMetadata,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::input(format!("model {}: {e}", path.display())))
    }
}
