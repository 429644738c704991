//! Posterior moments of the latent scores.
//!
//! For subject `j` in site `i`:
//! `Q_i = (S^T S / phi_i^2 + D_i^{-1})^{-1}` and
//! `a_hat_j = Q_i (D_i^{-1} B^T x_j + S^T y_j / phi_i^2)`.
//!
//! The mean is evaluated in the equivalent form
//! `B^T x_j + Q_i S^T (y_j - S B^T x_j) / phi_i^2`, which never divides by
//! a floored variance.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::ConnectivityDataset;
use crate::error::{Result, SlaccError};
use crate::likelihood::{project_all, site_covariances, SiteCovariance};
use crate::params::{ParameterSet, PosteriorMoments};
use crate::symmetric::loading_gram;

/// `Q_i` for one site.
pub fn posterior_site_covariance(
    theta: &ParameterSet,
    site: usize,
    data: &ConnectivityDataset,
) -> Result<DMatrix<f64>> {
    if site >= theta.n_sites() {
        return Err(SlaccError::UnseenSite(site));
    }
    let gram = loading_gram(&theta.u, data.mode());
    let s2: Vec<f64> = theta.sigma2.row(site).iter().copied().collect();
    let cov = SiteCovariance::new(&gram, &s2, theta.phi2[site], data.p())?;
    Ok(cov.posterior_cov())
}

/// Posterior means for every subject (`n x L`).
pub fn posterior_means(theta: &ParameterSet, data: &ConnectivityDataset) -> Result<DMatrix<f64>> {
    Ok(estep(theta, data)?.a_hat)
}

/// Full E-step.
pub fn estep(theta: &ParameterSet, data: &ConnectivityDataset) -> Result<PosteriorMoments> {
    theta.check_dims(data.v(), data.q(), data.n_sites())?;
    let gram = loading_gram(&theta.u, data.mode());
    let proj = project_all(&theta.u, data);
    estep_with(theta, data, &gram, &proj)
}

pub(crate) fn estep_with(
    theta: &ParameterSet,
    data: &ConnectivityDataset,
    gram: &DMatrix<f64>,
    proj: &DMatrix<f64>,
) -> Result<PosteriorMoments> {
    let covs = site_covariances(theta, gram, data.p())?;
    let q: Vec<DMatrix<f64>> = covs.iter().map(SiteCovariance::posterior_cov).collect();
    let l = theta.l();
    let rows: Vec<DVector<f64>> = (0..data.n())
        .into_par_iter()
        .map(|j| {
            let x: Vec<f64> = data.covariates().row(j).iter().copied().collect();
            let m = theta.prior_mean(&x);
            let s_t_r = proj.row(j).transpose() - gram * &m;
            m + covs[data.site(j)].gain(&s_t_r)
        })
        .collect();
    let mut a_hat = DMatrix::zeros(data.n(), l);
    for (j, r) in rows.iter().enumerate() {
        a_hat.set_row(j, &r.transpose());
    }
    Ok(PosteriorMoments { a_hat, q })
}
