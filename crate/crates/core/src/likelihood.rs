//! Observed-data likelihood under `y ~ N(S B^T x, S D_i S^T + phi_i^2 I_p)`.
//!
//! Nothing of size `p` is ever inverted. With `G = S^T S` and
//! `C_i = phi_i^2 I_L + D_i^{1/2} G D_i^{1/2}`:
//!
//! * `log|Sigma_i| = (p - L) log phi_i^2 + log|C_i|`
//! * `r^T Sigma_i^{-1} r = (r^T r - b^T C_i^{-1} b) / phi_i^2`, `b = D_i^{1/2} S^T r`

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::dataset::ConnectivityDataset;
use crate::error::{Result, SlaccError};
use crate::params::ParameterSet;
use crate::symmetric::{loading_design, loading_gram, loading_project, DiagonalMode};

/// Implicit representation of one site's covariance `S D_i S^T + phi_i^2 I_p`.
#[derive(Debug, Clone)]
pub struct SiteCovariance {
    d_sqrt: DVector<f64>,
    phi2: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl SiteCovariance {
    /// `gram` is `S^T S`, `sigma2` the site's latent variances.
    pub fn new(gram: &DMatrix<f64>, sigma2: &[f64], phi2: f64, p: usize) -> Result<Self> {
        let l = gram.nrows();
        if sigma2.len() != l {
            return Err(SlaccError::Dimension(format!(
                "{} latent variances for {} factors",
                sigma2.len(),
                l
            )));
        }
        if !(phi2 > 0.0) || !phi2.is_finite() {
            return Err(SlaccError::NotPositiveDefinite(format!("phi2 = {phi2}")));
        }
        if let Some(bad) = sigma2.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(SlaccError::NotPositiveDefinite(format!("sigma2 = {bad}")));
        }
        let d_sqrt = DVector::from_iterator(l, sigma2.iter().map(|s| s.sqrt()));
        let mut cap = DMatrix::from_fn(l, l, |a, b| d_sqrt[a] * gram[(a, b)] * d_sqrt[b]);
        for k in 0..l {
            cap[(k, k)] += phi2;
        }
        let chol = Cholesky::new(cap).ok_or_else(|| {
            SlaccError::NotPositiveDefinite("capacitance matrix is not positive definite".into())
        })?;
        let log_det_cap: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_det = (p as f64 - l as f64) * phi2.ln() + log_det_cap;
        Ok(Self {
            d_sqrt,
            phi2,
            chol,
            log_det,
        })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn phi2(&self) -> f64 {
        self.phi2
    }

    /// `r^T Sigma^{-1} r` from `||r||^2` and `S^T r`.
    pub fn quad_form(&self, r_norm_sq: f64, s_t_r: &DVector<f64>) -> f64 {
        let b = s_t_r.component_mul(&self.d_sqrt);
        let c_inv_b = self.chol.solve(&b);
        (r_norm_sq - b.dot(&c_inv_b)) / self.phi2
    }

    /// `D^{1/2} C^{-1} D^{1/2} v`; equals `Q v / phi^2`.
    pub(crate) fn gain(&self, v: &DVector<f64>) -> DVector<f64> {
        let b = v.component_mul(&self.d_sqrt);
        self.chol.solve(&b).component_mul(&self.d_sqrt)
    }

    /// Posterior covariance of the scores, `(G / phi^2 + D^{-1})^{-1}`.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let l = self.d_sqrt.len();
        let inv = self.chol.inverse();
        let mut q = DMatrix::from_fn(l, l, |a, b| {
            self.phi2 * self.d_sqrt[a] * inv[(a, b)] * self.d_sqrt[b]
        });
        // exact symmetry
        for a in 0..l {
            for b in (a + 1)..l {
                let m = 0.5 * (q[(a, b)] + q[(b, a)]);
                q[(a, b)] = m;
                q[(b, a)] = m;
            }
        }
        q
    }
}

/// Negative log-likelihood in both scalings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nll {
    /// Per-entry scaled value: `log(2 pi)/2 + {...} / (p n)`.
    pub scaled: f64,
    /// Unscaled total, `-sum_ij log L(y_ij)`; this is what feeds EBIC.
    pub total: f64,
}

/// `S^T y_j` for every subject, as the rows of an `n x L` matrix.
pub fn project_all(u: &DMatrix<f64>, data: &ConnectivityDataset) -> DMatrix<f64> {
    let mode = data.mode();
    let rows: Vec<DVector<f64>> = data
        .matrices()
        .par_iter()
        .map(|y| loading_project(u, y, mode))
        .collect();
    let mut out = DMatrix::zeros(data.n(), u.ncols());
    for (j, r) in rows.iter().enumerate() {
        out.set_row(j, &r.transpose());
    }
    out
}

/// Per-site covariance factors for the current parameters.
pub fn site_covariances(
    theta: &ParameterSet,
    gram: &DMatrix<f64>,
    p: usize,
) -> Result<Vec<SiteCovariance>> {
    (0..theta.n_sites())
        .map(|i| {
            let s2: Vec<f64> = theta.sigma2.row(i).iter().copied().collect();
            SiteCovariance::new(gram, &s2, theta.phi2[i], p)
        })
        .collect()
}

/// `mu = S B^T x`, the mean of one vectorized observation.
pub fn mean_vector(theta: &ParameterSet, x: &[f64], mode: DiagonalMode) -> Result<DVector<f64>> {
    if x.len() != theta.q() {
        return Err(SlaccError::Dimension(format!(
            "covariate row has {} entries, B has {} rows",
            x.len(),
            theta.q()
        )));
    }
    let s = loading_design(&theta.u, mode);
    Ok(s * theta.prior_mean(x))
}

/// Observed-data negative log-likelihood.
pub fn nll(theta: &ParameterSet, data: &ConnectivityDataset) -> Result<Nll> {
    theta.check_dims(data.v(), data.q(), data.n_sites())?;
    let gram = loading_gram(&theta.u, data.mode());
    let proj = project_all(&theta.u, data);
    nll_with(theta, data, &gram, &proj)
}

/// Same as [`nll`] with `S^T S` and `S^T y_j` supplied by the caller.
pub(crate) fn nll_with(
    theta: &ParameterSet,
    data: &ConnectivityDataset,
    gram: &DMatrix<f64>,
    proj: &DMatrix<f64>,
) -> Result<Nll> {
    let p = data.p();
    let n = data.n();
    let covs = site_covariances(theta, gram, p)?;
    let quads: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let x: Vec<f64> = data.covariates().row(j).iter().copied().collect();
            let m = theta.prior_mean(&x);
            let sty = proj.row(j).transpose();
            let gm = gram * &m;
            let r_norm = data.norm_sq(j) - 2.0 * m.dot(&sty) + m.dot(&gm);
            let s_t_r = sty - gm;
            covs[data.site(j)].quad_form(r_norm, &s_t_r)
        })
        .collect();
    let quad_sum: f64 = quads.iter().sum();
    let log_det_sum: f64 = data
        .site_sizes()
        .iter()
        .zip(&covs)
        .map(|(&ni, c)| ni as f64 * c.log_det())
        .sum();
    let brace = 0.5 * log_det_sum + 0.5 * quad_sum;
    let pn = (p * n) as f64;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let out = Nll {
        scaled: half_log_2pi + brace / pn,
        total: pn * half_log_2pi + brace,
    };
    if !out.total.is_finite() {
        return Err(SlaccError::Numerical("negative log-likelihood is not finite".into()));
    }
    Ok(out)
}
