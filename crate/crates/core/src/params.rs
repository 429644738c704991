use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaccError};

/// Model parameters `{U, B, sigma^2, phi^2}`.
///
/// * `u`: `V x L` loadings, one rank-1 pattern per column.
/// * `b`: `q x L` regression coefficients for the latent scores.
/// * `sigma2`: `M x L` site-specific latent variances.
/// * `phi2`: length-`M` site-specific residual variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub u: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub phi2: DVector<f64>,
}

impl ParameterSet {
    pub fn new(
        u: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma2: DMatrix<f64>,
        phi2: DVector<f64>,
    ) -> Result<Self> {
        let l = u.ncols();
        if b.ncols() != l || sigma2.ncols() != l {
            return Err(SlaccError::Dimension(format!(
                "U has {l} columns, B has {}, sigma2 has {}",
                b.ncols(),
                sigma2.ncols()
            )));
        }
        if sigma2.nrows() != phi2.len() {
            return Err(SlaccError::Dimension(format!(
                "sigma2 has {} site rows but phi2 has {} entries",
                sigma2.nrows(),
                phi2.len()
            )));
        }
        Ok(Self { u, b, sigma2, phi2 })
    }

    pub fn l(&self) -> usize {
        self.u.ncols()
    }

    pub fn v(&self) -> usize {
        self.u.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.phi2.len()
    }

    /// Number of exactly-nonzero loadings.
    pub fn nnz_u(&self) -> usize {
        self.u.iter().filter(|&&x| x != 0.0).count()
    }

    /// Prior mean of the latent scores, `B^T x`.
    pub fn prior_mean(&self, x: &[f64]) -> DVector<f64> {
        let l = self.l();
        DVector::from_fn(l, |k, _| {
            x.iter()
                .enumerate()
                .map(|(c, xc)| xc * self.b[(c, k)])
                .sum()
        })
    }

    /// Checks shapes against a dataset's dimensions.
    pub fn check_dims(&self, v: usize, q: usize, m: usize) -> Result<()> {
        if self.v() != v || self.q() != q || self.n_sites() != m {
            return Err(SlaccError::Dimension(format!(
                "parameters are (V={}, q={}, M={}) but data is (V={v}, q={q}, M={m})",
                self.v(),
                self.q(),
                self.n_sites()
            )));
        }
        Ok(())
    }

    /// Floors the variance components in place.
    pub fn apply_floor(&mut self, floor: f64) {
        self.sigma2.apply(|x| *x = x.max(floor));
        self.phi2.apply(|x| *x = x.max(floor));
    }
}

/// Posterior moments of the latent scores.
///
/// `a_hat` is `n x L`; `q[i]` is the `L x L` posterior covariance shared by
/// every subject of site `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub a_hat: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
}

impl PosteriorMoments {
    pub fn scores(&self, j: usize) -> Vec<f64> {
        self.a_hat.row(j).iter().copied().collect()
    }
}
