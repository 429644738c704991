//! Synthetic two-site data, estimator comparison and site-effect F statistics.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::dataset::ConnectivityDataset;
use crate::em::{fit, fit_fixed_loadings};
use crate::error::{Result, SlaccError};
use crate::params::ParameterSet;
use crate::selection::select_l;
use crate::symmetric::DiagonalMode;

/// Data-generating design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// 1: disjoint supports, 2: overlapping supports.
    pub scenario: u8,
    pub v: usize,
    pub l: usize,
    /// Number of standard-normal biological covariates.
    pub q_bio: usize,
    pub n_per_site: Vec<usize>,
    /// Fraction of nonzero loadings per column.
    pub sparsity: f64,
    pub sigma2: DMatrix<f64>,
    pub phi2: DVector<f64>,
    pub site_intercepts: DMatrix<f64>,
    pub mode: DiagonalMode,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Two sites of equal size, `V = 50`, `L = 5`, two covariates.
    pub fn standard(scenario: u8, n: usize, seed: u64) -> Self {
        let l = 5;
        let sigma2 = DMatrix::from_fn(2, l, |i, k| {
            if i == 0 {
                (k + 1) as f64
            } else {
                (l - k) as f64
            }
        });
        let site_intercepts = DMatrix::from_fn(2, l, |i, _| if i == 0 { 0.3 } else { -0.3 });
        Self {
            scenario,
            v: 50,
            l,
            q_bio: 2,
            n_per_site: vec![n / 2, n - n / 2],
            sparsity: if scenario == 1 { 0.2 } else { 0.4 },
            sigma2,
            phi2: DVector::from_vec(vec![1.2, 0.8]),
            site_intercepts,
            mode: DiagonalMode::Include,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.n_per_site.iter().sum()
    }

    pub fn n_sites(&self) -> usize {
        self.n_per_site.len()
    }

    pub fn with_n(&self, n: usize) -> Self {
        let m = self.n_sites();
        let mut sizes = vec![n / m; m];
        for s in sizes.iter_mut().take(n % m) {
            *s += 1;
        }
        Self {
            n_per_site: sizes,
            ..self.clone()
        }
    }

    fn nonzeros_per_column(&self) -> usize {
        (self.sparsity * self.v as f64).round() as usize
    }

    pub fn check(&self) -> Result<()> {
        let m = self.n_sites();
        if self.sigma2.shape() != (m, self.l)
            || self.site_intercepts.shape() != (m, self.l)
            || self.phi2.len() != m
        {
            return Err(SlaccError::Dimension(
                "scenario variances and intercepts must be M x L, phi2 length M".into(),
            ));
        }
        let k = self.nonzeros_per_column();
        let feasible = match self.scenario {
            1 => k * self.l <= self.v,
            2 => k <= self.v,
            _ => false,
        };
        if !feasible || k == 0 {
            return Err(SlaccError::InvalidInput(format!(
                "scenario {} cannot place {k} nonzeros per column in V = {} rows for L = {}",
                self.scenario, self.v, self.l
            )));
        }
        Ok(())
    }
}

/// Independent stream for one `(n, replicate)` cell of a study.
pub fn replicate_rng(seed: u64, n: usize, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 32) | replicate as u64);
    rng
}

fn truth_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Sparse loadings with unit-norm columns and positive first nonzero entry.
pub fn make_true_u<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.check()?;
    let k = spec.nonzeros_per_column();
    let mag = Uniform::new_inclusive(0.5, 1.0);
    let mut u = DMatrix::zeros(spec.v, spec.l);
    for col in 0..spec.l {
        let rows: Vec<usize> = if spec.scenario == 1 {
            (col * k..(col + 1) * k).collect()
        } else {
            let mut r = sample(rng, spec.v, k).into_vec();
            r.sort_unstable();
            r
        };
        for r in rows {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            u[(r, col)] = sign * mag.sample(rng);
        }
        let norm = u.column(col).norm();
        u.column_mut(col).scale_mut(1.0 / norm);
        if let Some(first) = u.column(col).iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                u.column_mut(col).neg_mut();
            }
        }
    }
    Ok(u)
}

/// Fixed ground truth shared by every replicate of a study.
#[derive(Debug, Clone)]
pub struct SimulationTruth {
    pub u: DMatrix<f64>,
    /// `(q_bio + M) x L`: biological rows first, then one row per site.
    pub b: DMatrix<f64>,
}

impl SimulationTruth {
    pub fn theta(&self, spec: &ScenarioSpec) -> ParameterSet {
        ParameterSet {
            u: self.u.clone(),
            b: self.b.clone(),
            sigma2: spec.sigma2.clone(),
            phi2: spec.phi2.clone(),
        }
    }
}

pub fn make_truth(spec: &ScenarioSpec) -> Result<SimulationTruth> {
    let mut rng = truth_rng(spec.seed);
    let u = make_true_u(spec, &mut rng)?;
    let m = spec.n_sites();
    let b = DMatrix::from_fn(spec.q_bio + m, spec.l, |r, c| {
        if r < spec.q_bio {
            0.0
        } else {
            spec.site_intercepts[(r - spec.q_bio, c)]
        }
    });
    let mut b = b;
    for c in 0..spec.l {
        for r in 0..spec.q_bio {
            b[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(SimulationTruth { u, b })
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub data: ConnectivityDataset,
    pub theta: ParameterSet,
    pub a_true: DMatrix<f64>,
}

/// Draws one dataset: covariates, latent scores, symmetric noise.
pub fn generate_dataset<R: Rng + ?Sized>(
    truth: &SimulationTruth,
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<SimulatedData> {
    spec.check()?;
    let (v, l, m) = (spec.v, spec.l, spec.n_sites());
    let n = spec.n();
    let q = spec.q_bio + m;
    let mut sites = Vec::with_capacity(n);
    for (i, &ni) in spec.n_per_site.iter().enumerate() {
        sites.extend(std::iter::repeat_n(i, ni));
    }
    let mut x = DMatrix::zeros(n, q);
    for j in 0..n {
        for c in 0..spec.q_bio {
            x[(j, c)] = StandardNormal.sample(rng);
        }
        x[(j, spec.q_bio + sites[j])] = 1.0;
    }
    let mean = &x * &truth.b;
    let mut a_true = DMatrix::zeros(n, l);
    let mut matrices = Vec::with_capacity(n);
    for j in 0..n {
        let i = sites[j];
        for k in 0..l {
            let sd = spec.sigma2[(i, k)].sqrt();
            let z: f64 = StandardNormal.sample(rng);
            a_true[(j, k)] = mean[(j, k)] + sd * z;
        }
        let noise = Normal::new(0.0, spec.phi2[i].sqrt())
            .map_err(|e| SlaccError::InvalidInput(e.to_string()))?;
        let mut y = DMatrix::zeros(v, v);
        for r in 0..v {
            for c in r..v {
                let e = noise.sample(rng);
                y[(r, c)] = e;
                y[(c, r)] = e;
            }
        }
        for k in 0..l {
            let col = truth.u.column(k);
            y.ger(a_true[(j, k)], &col, &col, 1.0);
        }
        for r in 0..v {
            for c in (r + 1)..v {
                y[(c, r)] = y[(r, c)];
            }
        }
        matrices.push(y);
    }
    let data = ConnectivityDataset::new(matrices, sites, x, spec.mode)?;
    Ok(SimulatedData {
        data,
        theta: truth.theta(spec),
        a_true,
    })
}

/// Column matching of an estimate to the truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    /// `permutation[l]` is the estimated column matched to true column `l`.
    pub permutation: Vec<usize>,
    pub signs: Vec<i8>,
}

fn column_correlation(a: &DMatrix<f64>, ca: usize, b: &DMatrix<f64>, cb: usize) -> f64 {
    let n = a.nrows() as f64;
    let x = a.column(ca);
    let y = b.column(cb);
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for r in 0..a.nrows() {
        let dx = x[r] - mx;
        let dy = y[r] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Minimum-cost perfect assignment of rows to columns of a square cost
/// matrix (Hungarian method with potentials). Returns the column of each row.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `U_hat` padded with zero columns up to `l` columns.
fn pad_columns(m: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), l.max(m.ncols()), |r, c| {
        if c < m.ncols() {
            m[(r, c)]
        } else {
            0.0
        }
    })
}

/// Permutation maximizing the total absolute correlation, with signs that
/// make every matched correlation nonnegative. Estimates with fewer columns
/// than the truth are padded with zero columns.
pub fn align(u_hat: &DMatrix<f64>, u_true: &DMatrix<f64>) -> Result<AlignmentMap> {
    if u_hat.nrows() != u_true.nrows() || u_hat.ncols() > u_true.ncols() {
        return Err(SlaccError::Dimension(format!(
            "cannot align {}x{} estimate to {}x{} truth",
            u_hat.nrows(),
            u_hat.ncols(),
            u_true.nrows(),
            u_true.ncols()
        )));
    }
    let l = u_true.ncols();
    let est = pad_columns(u_hat, l);
    let corr = DMatrix::from_fn(l, l, |t, e| column_correlation(u_true, t, &est, e));
    let permutation = min_cost_assignment(&corr.map(|c| -c.abs()));
    let signs = (0..l)
        .map(|t| if corr[(t, permutation[t])] < 0.0 { -1 } else { 1 })
        .collect();
    Ok(AlignmentMap { permutation, signs })
}

impl AlignmentMap {
    /// Reorders and flips an estimate to the truth's column order. Missing
    /// columns become zero loadings with zero coefficients and variances.
    pub fn apply(&self, theta: &ParameterSet) -> ParameterSet {
        let l = self.permutation.len();
        let u = pad_columns(&theta.u, l);
        let b = pad_columns(&theta.b, l);
        let s2 = pad_columns(&theta.sigma2, l);
        let pick = |m: &DMatrix<f64>, flip: bool| {
            DMatrix::from_fn(m.nrows(), l, |r, c| {
                let s = if flip { self.signs[c] as f64 } else { 1.0 };
                s * m[(r, self.permutation[c])]
            })
        };
        ParameterSet {
            u: pick(&u, true),
            b: pick(&b, false),
            sigma2: pick(&s2, false),
            phi2: theta.phi2.clone(),
        }
    }
}

/// Squared errors per parameter block and support recovery for one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub se_u: f64,
    pub se_b: f64,
    pub se_sigma2: f64,
    pub se_phi2: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl ReplicateMetrics {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("se_U", self.se_u),
            ("se_B", self.se_b),
            ("se_sigma2", self.se_sigma2),
            ("se_phi2", self.se_phi2),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
        ]
    }
}

/// `theta_hat` must already be aligned to `theta_true`.
pub fn metrics(theta_hat: &ParameterSet, theta_true: &ParameterSet) -> ReplicateMetrics {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (h, t) in theta_hat.u.iter().zip(theta_true.u.iter()) {
        if *t != 0.0 {
            pos += 1;
            tp += usize::from(*h != 0.0);
        } else {
            neg += 1;
            tn += usize::from(*h == 0.0);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    ReplicateMetrics {
        se_u: (&theta_hat.u - &theta_true.u).norm_squared(),
        se_b: (&theta_hat.b - &theta_true.b).norm_squared(),
        se_sigma2: (&theta_hat.sigma2 - &theta_true.sigma2).norm_squared(),
        se_phi2: (&theta_hat.phi2 - &theta_true.phi2).norm_squared(),
        sensitivity: ratio(tp, pos),
        specificity: ratio(tn, neg),
    }
}

/// Mean squared error with its variance/bias split across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub mse: f64,
    pub variance: f64,
    pub bias2: f64,
}

/// `variance = mean ||est - mean(est)||^2`, `bias2 = mse - variance`.
pub fn decompose_error(estimates: &[&[f64]], truth: &[f64]) -> ErrorDecomposition {
    let b = estimates.len();
    if b == 0 {
        return ErrorDecomposition {
            mse: f64::NAN,
            variance: f64::NAN,
            bias2: f64::NAN,
        };
    }
    let d = truth.len();
    let mut mean = vec![0.0; d];
    for e in estimates {
        for (m, x) in mean.iter_mut().zip(e.iter()) {
            *m += x / b as f64;
        }
    }
    let mut mse = 0.0;
    let mut variance = 0.0;
    for e in estimates {
        for k in 0..d {
            mse += (e[k] - truth[k]).powi(2);
            variance += (e[k] - mean[k]).powi(2);
        }
    }
    mse /= b as f64;
    variance /= b as f64;
    ErrorDecomposition {
        mse,
        variance,
        bias2: mse - variance,
    }
}

/// F statistics for one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteFStat {
    /// One-way ANOVA F for equal means.
    pub f_mean: f64,
    /// ANOVA F on absolute deviations from the site medians.
    pub f_variance: f64,
    /// Some site had a single subject and was left out.
    pub flagged: bool,
}

/// One-way ANOVA F over groups; NaN with fewer than two groups or no
/// within-group spread.
pub fn anova_f(groups: &[Vec<f64>]) -> f64 {
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    if k < 2 || n <= k {
        return f64::NAN;
    }
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        between += g.len() as f64 * (m - grand).powi(2);
        within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-factor site tests on an `n x L` score matrix.
pub fn site_f_statistics(scores: &DMatrix<f64>, sites: &[usize]) -> Result<Vec<SiteFStat>> {
    if sites.len() != scores.nrows() {
        return Err(SlaccError::LengthMismatch {
            expected: scores.nrows(),
            actual: sites.len(),
        });
    }
    let m = sites.iter().map(|s| s + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); m];
    for (j, &s) in sites.iter().enumerate() {
        members[s].push(j);
    }
    let flagged = members.iter().any(|g| g.len() == 1);
    if flagged {
        log::warn!("sites with a single subject are left out of the F statistics");
    }
    let usable: Vec<&Vec<usize>> = members.iter().filter(|g| g.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(SlaccError::InvalidInput(
            "F statistics need at least two sites with two or more subjects".into(),
        ));
    }
    Ok((0..scores.ncols())
        .map(|k| {
            let groups: Vec<Vec<f64>> = usable
                .iter()
                .map(|g| g.iter().map(|&j| scores[(j, k)]).collect())
                .collect();
            let deviations: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    let med = median(g);
                    g.iter().map(|x| (x - med).abs()).collect()
                })
                .collect();
            SiteFStat {
                f_mean: anova_f(&groups),
                f_variance: anova_f(&deviations),
                flagged,
            }
        })
        .collect())
}

pub const METHOD_SLACC: &str = "SLACC";
pub const METHOD_NOPEN: &str = "SLACC-NoPen";
pub const METHOD_TRUE: &str = "SLACC-True";

/// Settings for the estimator comparison study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation1Config {
    pub base: ScenarioSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub fit: FitConfig,
}

/// Long-format result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub method: String,
    pub scenario: u8,
    pub n: usize,
    pub replicate: usize,
    pub metric: String,
    pub value: f64,
}

/// Aggregate over replicates for one `(method, scenario, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: u8,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub mse_u: f64,
    pub bias2_u: f64,
    pub var_u: f64,
    pub mse_b: f64,
    pub bias2_b: f64,
    pub var_b: f64,
    pub mse_sigma2: f64,
    pub bias2_sigma2: f64,
    pub var_sigma2: f64,
    pub mse_phi2: f64,
    pub bias2_phi2: f64,
    pub var_phi2: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: &'static str,
    pub n: usize,
    pub replicate: usize,
    pub estimate: Option<ParameterSet>,
    pub metrics: Option<ReplicateMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Simulation1Output {
    pub results: Vec<MethodResult>,
    pub tidy: Vec<TidyRow>,
    pub summary: Vec<SummaryRow>,
}

fn run_method(
    method: &'static str,
    sim: &SimulatedData,
    cfg: &FitConfig,
    l: usize,
) -> Result<ParameterSet> {
    let res = match method {
        METHOD_SLACC => fit(&sim.data, l, cfg)?,
        METHOD_NOPEN => {
            let c = FitConfig {
                lambda_max: Some(0.0),
                ..cfg.clone()
            };
            fit(&sim.data, l, &c)?
        }
        _ => fit_fixed_loadings(&sim.data, &sim.theta.u, cfg)?,
    };
    let map = align(&res.theta.u, &sim.theta.u)?;
    Ok(map.apply(&res.theta))
}

fn summarize(
    results: &[MethodResult],
    truth: &ParameterSet,
    scenario: u8,
    n_grid: &[usize],
) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for method in [METHOD_SLACC, METHOD_NOPEN, METHOD_TRUE] {
        for &n in n_grid {
            let cell: Vec<&MethodResult> = results
                .iter()
                .filter(|r| r.method == method && r.n == n)
                .collect();
            let ok: Vec<&ParameterSet> = cell.iter().filter_map(|r| r.estimate.as_ref()).collect();
            let block = |f: fn(&ParameterSet) -> &[f64]| {
                let est: Vec<&[f64]> = ok.iter().map(|t| f(t)).collect();
                decompose_error(&est, f(truth))
            };
            let u = block(|t| t.u.as_slice());
            let b = block(|t| t.b.as_slice());
            let s = block(|t| t.sigma2.as_slice());
            let p = block(|t| t.phi2.as_slice());
            let mean_of = |f: fn(&ReplicateMetrics) -> f64| {
                let vals: Vec<f64> = cell.iter().filter_map(|r| r.metrics.as_ref()).map(f).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            };
            out.push(SummaryRow {
                method: method.to_string(),
                scenario,
                n,
                replicates: cell.len(),
                failures: cell.len() - ok.len(),
                mse_u: u.mse,
                bias2_u: u.bias2,
                var_u: u.variance,
                mse_b: b.mse,
                bias2_b: b.bias2,
                var_b: b.variance,
                mse_sigma2: s.mse,
                bias2_sigma2: s.bias2,
                var_sigma2: s.variance,
                mse_phi2: p.mse,
                bias2_phi2: p.bias2,
                var_phi2: p.variance,
                sensitivity: mean_of(|m| m.sensitivity),
                specificity: mean_of(|m| m.specificity),
            });
        }
    }
    out
}

/// Compares the penalized fit, the unpenalized fit and the oracle-loading
/// fit over a grid of sample sizes.
pub fn run_simulation1(cfg: &Simulation1Config) -> Result<Simulation1Output> {
    let truth = make_truth(&cfg.base)?;
    let theta_true = truth.theta(&cfg.base);
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let per_cell: Vec<Vec<MethodResult>> = cells
        .par_iter()
        .map(|&(n, rep)| {
            let spec = cfg.base.with_n(n);
            let mut rng = replicate_rng(cfg.base.seed, n, rep);
            let sim = match generate_dataset(&truth, &spec, &mut rng) {
                Ok(s) => s,
                Err(e) => {
                    return [METHOD_SLACC, METHOD_NOPEN, METHOD_TRUE]
                        .iter()
                        .map(|&method| MethodResult {
                            method,
                            n,
                            replicate: rep,
                            estimate: None,
                            metrics: None,
                            error: Some(e.to_string()),
                        })
                        .collect();
                }
            };
            [METHOD_SLACC, METHOD_NOPEN, METHOD_TRUE]
                .iter()
                .map(|&method| match run_method(method, &sim, &cfg.fit, spec.l) {
                    Ok(est) => MethodResult {
                        method,
                        n,
                        replicate: rep,
                        metrics: Some(metrics(&est, &sim.theta)),
                        estimate: Some(est),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{method}, n = {n}, replicate {rep}: {e}");
                        MethodResult {
                            method,
                            n,
                            replicate: rep,
                            estimate: None,
                            metrics: None,
                            error: Some(e.to_string()),
                        }
                    }
                })
                .collect()
        })
        .collect();
    let results: Vec<MethodResult> = per_cell.into_iter().flatten().collect();
    let mut tidy = Vec::new();
    for r in &results {
        let mut push = |metric: &str, value: f64| {
            tidy.push(TidyRow {
                method: r.method.to_string(),
                scenario: cfg.base.scenario,
                n: r.n,
                replicate: r.replicate,
                metric: metric.to_string(),
                value,
            })
        };
        match &r.metrics {
            Some(m) => {
                for (name, value) in m.named() {
                    push(name, value);
                }
            }
            None => push("failed", 1.0),
        }
    }
    let summary = summarize(&results, &theta_true, cfg.base.scenario, &cfg.n_grid);
    Ok(Simulation1Output {
        results,
        tidy,
        summary,
    })
}

/// Settings for the rank-selection study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation2Config {
    pub base: ScenarioSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub l_grid: Vec<usize>,
    pub gamma: f64,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub scenario: u8,
    pub n: usize,
    pub replicate: usize,
    /// 0 when the selection failed.
    pub selected_l: usize,
    pub error: Option<String>,
}

/// Selected number of factors per replicate.
pub fn run_simulation2(cfg: &Simulation2Config) -> Result<Vec<SelectionRow>> {
    let truth = make_truth(&cfg.base)?;
    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(n, rep)| {
            let spec = cfg.base.with_n(n);
            let mut rng = replicate_rng(cfg.base.seed, n, rep);
            let outcome = generate_dataset(&truth, &spec, &mut rng)
                .and_then(|sim| select_l(&sim.data, &cfg.l_grid, cfg.gamma, &cfg.fit));
            match outcome {
                Ok(sel) => SelectionRow {
                    scenario: cfg.base.scenario,
                    n,
                    replicate: rep,
                    selected_l: sel.best_l,
                    error: None,
                },
                Err(e) => SelectionRow {
                    scenario: cfg.base.scenario,
                    n,
                    replicate: rep,
                    selected_l: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn scenario_one_supports() {
        let spec = ScenarioSpec::standard(1, 100, 3);
        let u = make_true_u(&spec, &mut truth_rng(3)).unwrap();
        for k in 0..5 {
            let col = u.column(k);
            assert_eq!(col.iter().filter(|x| **x != 0.0).count(), 10);
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
        for r in 0..50 {
            assert!(u.row(r).iter().filter(|x| **x != 0.0).count() <= 1);
        }
    }

    #[test]
    fn scenario_two_density() {
        let spec = ScenarioSpec::standard(2, 100, 3);
        let u = make_true_u(&spec, &mut truth_rng(3)).unwrap();
        for k in 0..5 {
            assert_eq!(u.column(k).iter().filter(|x| **x != 0.0).count(), 20);
            assert!((u.column(k).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_support_is_rejected() {
        let mut spec = ScenarioSpec::standard(1, 100, 3);
        spec.sparsity = 0.3;
        assert!(make_true_u(&spec, &mut truth_rng(1)).is_err());
    }

    #[test]
    fn noiseless_data_are_exact() {
        let mut spec = ScenarioSpec::standard(1, 6, 1);
        spec.v = 10;
        spec.l = 2;
        spec.sparsity = 0.3;
        spec.sigma2 = DMatrix::from_element(2, 2, 0.0);
        spec.site_intercepts = DMatrix::from_element(2, 2, 0.3);
        spec.phi2 = DVector::from_element(2, 0.0);
        let truth = make_truth(&spec).unwrap();
        let sim = generate_dataset(&truth, &spec, &mut replicate_rng(1, 6, 0)).unwrap();
        let mean = sim.data.covariates() * &truth.b;
        for j in 0..6 {
            let a: Vec<f64> = mean.row(j).iter().copied().collect();
            let expect = crate::symmetric::reconstruct(&truth.u, &a);
            assert!((sim.data.matrix(j) - expect).abs().max() < 1e-12);
        }
    }

    #[test]
    fn alignment_of_swapped_columns() {
        let u = dmatrix![1.0, 0.0, 0.0; 0.5, 1.0, 0.0; 0.0, 0.3, 1.0; 0.2, 0.0, -0.4];
        let map = align(&u, &u).unwrap();
        assert_eq!(map.permutation, vec![0, 1, 2]);
        assert_eq!(map.signs, vec![1, 1, 1]);
        let mut w = u.clone();
        w.swap_columns(0, 1);
        w.column_mut(2).neg_mut();
        let map = align(&w, &u).unwrap();
        assert_eq!(map.permutation, vec![1, 0, 2]);
        assert_eq!(map.signs, vec![1, 1, -1]);
    }

    #[test]
    fn support_counting() {
        let truth = ParameterSet {
            u: dmatrix![1.0, 0.0; 0.0, 1.0],
            b: DMatrix::zeros(1, 2),
            sigma2: DMatrix::zeros(1, 2),
            phi2: DVector::zeros(1),
        };
        let mut est = truth.clone();
        est.u = dmatrix![0.0, 0.5; 0.0, 1.0];
        let m = metrics(&est, &truth);
        assert_eq!(m.sensitivity, 0.5);
        assert_eq!(m.specificity, 0.5);
        let m = metrics(&truth, &truth);
        assert_eq!((m.se_u, m.sensitivity, m.specificity), (0.0, 1.0, 1.0));
        est.u = dmatrix![1.0, 0.1; 0.1, 1.0];
        let m = metrics(&est, &truth);
        assert_eq!((m.sensitivity, m.specificity), (1.0, 0.0));
    }

    #[test]
    fn separated_means_give_large_f() {
        let mut scores = DMatrix::zeros(200, 1);
        let mut rng = replicate_rng(5, 0, 0);
        let mut sites = Vec::new();
        for j in 0..200 {
            let z: f64 = StandardNormal.sample(&mut rng);
            scores[(j, 0)] = z + if j < 100 { 0.0 } else { 10.0 };
            sites.push(usize::from(j >= 100));
        }
        let f = site_f_statistics(&scores, &sites).unwrap();
        assert!(f[0].f_mean > 100.0);
    }

    #[test]
    fn anova_hand_computation() {
        // means 2 and 5, within SS = 2 + 2, between = 3 * (1.5^2) * 2
        let f = anova_f(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert!((f - 13.5 / 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_site_is_flagged() {
        let scores = dmatrix![1.0; 2.0; 3.0; 5.0; 4.0; 9.0];
        let f = site_f_statistics(&scores, &[0, 0, 1, 1, 1, 2]).unwrap();
        assert!(f[0].flagged);
        assert!(site_f_statistics(&scores, &[0, 0, 0, 0, 0, 1]).is_err());
    }
}
