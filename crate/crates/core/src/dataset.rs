use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SlaccError};
use crate::symmetric::{max_asymmetry, vec_norm_sq, DiagonalMode, SYMMETRY_TOL};

/// How the dataset constructor treats asymmetric input.
#[derive(Debug, Clone, Copy, Default)]
pub struct DatasetOptions {
    /// Replace every matrix by `(Y + Y^T) / 2`, whatever its asymmetry.
    pub symmetrize_all: bool,
    /// Declared number of sites. Sites without subjects are then allowed,
    /// which is what scoring data for a fitted model needs.
    pub n_sites: Option<usize>,
}

/// `n` symmetric connectivity matrices with site labels and covariates.
///
/// Sites are zero-based. Matrices within [`SYMMETRY_TOL`] of symmetric are
/// stored exactly symmetric; in exclude mode their diagonals are stored as 0.
#[derive(Debug, Clone)]
pub struct ConnectivityDataset {
    matrices: Vec<DMatrix<f64>>,
    sites: Vec<usize>,
    covariates: DMatrix<f64>,
    mode: DiagonalMode,
    n_sites: usize,
    v: usize,
    site_members: Vec<Vec<usize>>,
    norms: Vec<f64>,
}

fn symmetrize(y: &mut DMatrix<f64>) {
    let v = y.nrows();
    for r in 0..v {
        for c in (r + 1)..v {
            let m = 0.5 * (y[(r, c)] + y[(c, r)]);
            y[(r, c)] = m;
            y[(c, r)] = m;
        }
    }
}

impl ConnectivityDataset {
    pub fn new(
        matrices: Vec<DMatrix<f64>>,
        sites: Vec<usize>,
        covariates: DMatrix<f64>,
        mode: DiagonalMode,
    ) -> Result<Self> {
        Self::with_options(matrices, sites, covariates, mode, DatasetOptions::default())
    }

    /// Builds a dataset. The number of sites is `max(site) + 1` and every site
    /// in between must have at least one subject.
    pub fn with_options(
        mut matrices: Vec<DMatrix<f64>>,
        sites: Vec<usize>,
        covariates: DMatrix<f64>,
        mode: DiagonalMode,
        options: DatasetOptions,
    ) -> Result<Self> {
        let n = matrices.len();
        if sites.len() != n {
            return Err(SlaccError::Dimension(format!(
                "{} matrices but {} site labels",
                n,
                sites.len()
            )));
        }
        if covariates.nrows() != n {
            return Err(SlaccError::Dimension(format!(
                "{} matrices but {} covariate rows",
                n,
                covariates.nrows()
            )));
        }
        let v = matrices.first().map(|m| m.nrows()).unwrap_or(0);
        for (j, m) in matrices.iter_mut().enumerate() {
            if m.nrows() != m.ncols() {
                return Err(SlaccError::NotSquare {
                    rows: m.nrows(),
                    cols: m.ncols(),
                });
            }
            if m.nrows() != v {
                return Err(SlaccError::Dimension(format!(
                    "subject {j} has V = {} but subject 0 has V = {v}",
                    m.nrows()
                )));
            }
            if options.symmetrize_all || max_asymmetry(m) <= SYMMETRY_TOL {
                symmetrize(m);
            }
            if mode == DiagonalMode::Exclude {
                m.fill_diagonal(0.0);
            }
        }
        let observed = sites.iter().map(|s| s + 1).max().unwrap_or(0);
        let n_sites = options.n_sites.unwrap_or(observed);
        if observed > n_sites {
            return Err(SlaccError::UnseenSite(observed - 1));
        }
        let mut site_members = vec![Vec::new(); n_sites];
        for (j, &s) in sites.iter().enumerate() {
            site_members[s].push(j);
        }
        if options.n_sites.is_none() {
            if let Some(empty) = site_members.iter().position(|m| m.is_empty()) {
                return Err(SlaccError::InvalidInput(format!("site {empty} has no subjects")));
            }
        }
        let norms = matrices.iter().map(|m| vec_norm_sq(m, mode)).collect();
        Ok(Self {
            matrices,
            sites,
            covariates,
            mode,
            n_sites,
            v,
            site_members,
            norms,
        })
    }

    pub fn n(&self) -> usize {
        self.matrices.len()
    }

    pub fn v(&self) -> usize {
        self.v
    }

    /// Length of the vectorized observation.
    pub fn p(&self) -> usize {
        self.mode.p(self.v)
    }

    pub fn q(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn mode(&self) -> DiagonalMode {
        self.mode
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn matrix(&self, j: usize) -> &DMatrix<f64> {
        &self.matrices[j]
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn site(&self, j: usize) -> usize {
        self.sites[j]
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Subject indices belonging to site `i`, in dataset order.
    pub fn site_members(&self, i: usize) -> &[usize] {
        &self.site_members[i]
    }

    pub fn site_sizes(&self) -> Vec<usize> {
        self.site_members.iter().map(Vec::len).collect()
    }

    /// `||T(Y_j)||^2`, cached at construction.
    pub(crate) fn norm_sq(&self, j: usize) -> f64 {
        self.norms[j]
    }

    /// A new dataset with the given subjects, keeping the site numbering and
    /// the site count (sites may end up empty).
    pub fn subset(&self, subjects: &[usize]) -> Result<Self> {
        let matrices = subjects.iter().map(|&j| self.matrices[j].clone()).collect();
        let sites = subjects.iter().map(|&j| self.sites[j]).collect();
        let x = DMatrix::from_fn(subjects.len(), self.q(), |r, c| {
            self.covariates[(subjects[r], c)]
        });
        let options = DatasetOptions {
            symmetrize_all: false,
            n_sites: Some(self.n_sites),
        };
        Self::with_options(matrices, sites, x, self.mode, options)
    }

    /// Index of the first site without subjects, if any.
    pub fn empty_site(&self) -> Option<usize> {
        self.site_members.iter().position(|m| m.is_empty())
    }

    /// Checks symmetry, finiteness, covariate rank and (optionally) the
    /// bounds on `L`. Never fails; the caller decides what is fatal.
    pub fn validate(&self, l: Option<usize>) -> ValidationReport {
        let mut violations = Vec::new();
        for (j, m) in self.matrices.iter().enumerate() {
            if m.iter().any(|x| !x.is_finite()) {
                violations.push(Violation::NonFinite { subject: j });
                continue;
            }
            let dev = max_asymmetry(m);
            if dev > SYMMETRY_TOL {
                violations.push(Violation::Asymmetric {
                    subject: j,
                    max_deviation: dev,
                });
            }
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFiniteCovariates);
        } else {
            let rank = numerical_rank(&self.covariates);
            if rank < self.q() {
                violations.push(Violation::RankDeficientCovariates {
                    rank,
                    q: self.q(),
                });
            }
        }
        if let Some(l) = l {
            if l >= self.v {
                violations.push(Violation::RankNotBelowV { l, v: self.v });
            }
            let smallest = self.n().min(self.q()).min(l);
            if smallest < 2 {
                violations.push(Violation::DimensionsTooSmall {
                    n: self.n(),
                    q: self.q(),
                    l,
                });
            }
        }
        ValidationReport { violations }
    }
}

fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// One failed identifiability or data-quality check.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonFinite { subject: usize },
    Asymmetric { subject: usize, max_deviation: f64 },
    NonFiniteCovariates,
    /// Condition A.5: `X` must have full column rank.
    RankDeficientCovariates { rank: usize, q: usize },
    /// Condition A.1: `L < V`.
    RankNotBelowV { l: usize, v: usize },
    /// Condition A.1: `min(n, q, L) >= 2`.
    DimensionsTooSmall { n: usize, q: usize, l: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonFinite { subject } => write!(f, "subject {subject}: non-finite entries"),
            Violation::Asymmetric {
                subject,
                max_deviation,
            } => write!(f, "subject {subject}: asymmetric (max deviation {max_deviation:e})"),
            Violation::NonFiniteCovariates => write!(f, "covariates contain non-finite values"),
            Violation::RankDeficientCovariates { rank, q } => {
                write!(f, "condition A.5: covariate matrix has rank {rank} < q = {q}")
            }
            Violation::RankNotBelowV { l, v } => {
                write!(f, "condition A.1: L = {l} must be smaller than V = {v}")
            }
            Violation::DimensionsTooSmall { n, q, l } => {
                write!(f, "condition A.1: min(n, q, L) = min({n}, {q}, {l}) < 2")
            }
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rank_bound_violation(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::RankNotBelowV { .. }))
    }
}
