//! Batch-free scores and matrices.
//!
//! The site part of `x^T beta_l` is split into a common intercept `alpha_l`
//! and centered site effects `gamma_il` (unweighted mean zero over sites).
//! Scores are then mapped to
//!
//! ```text
//! a_h = sigma_h,l / sigma_il * (a - alpha_l - z^T theta_l - gamma_il) + alpha_l + z^T theta_l
//! ```
//!
//! and residuals are rescaled by `phi_h / phi_i`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ConnectivityDataset;
use crate::error::{Result, SlaccError};
use crate::estep::estep;
use crate::params::ParameterSet;
use crate::symmetric::{reconstruct, DiagonalMode};

/// Which columns of `X` carry what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub biological_columns: Vec<usize>,
    /// `site_columns[i]` is the indicator column of site `i`; `None` marks a
    /// reference site whose effect is carried by the intercept.
    pub site_columns: Vec<Option<usize>>,
    pub intercept: Option<usize>,
}

impl DesignSpec {
    /// `q_bio` biological columns followed by one indicator per site.
    pub fn one_hot(q_bio: usize, n_sites: usize) -> Self {
        Self {
            biological_columns: (0..q_bio).collect(),
            site_columns: (0..n_sites).map(|i| Some(q_bio + i)).collect(),
            intercept: None,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.site_columns.len()
    }

    /// Checks that the declared columns partition `0..q`.
    pub fn check(&self, q: usize) -> Result<()> {
        let mut seen = vec![false; q];
        let cols = self
            .biological_columns
            .iter()
            .copied()
            .chain(self.site_columns.iter().flatten().copied())
            .chain(self.intercept);
        for c in cols {
            if c >= q {
                return Err(SlaccError::InvalidInput(format!(
                    "design column {c} is outside X with {q} columns"
                )));
            }
            if seen[c] {
                return Err(SlaccError::InvalidInput(format!(
                    "design column {c} is declared twice"
                )));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(SlaccError::InvalidInput(format!(
                "column {c} of X is not declared in the design"
            )));
        }
        Ok(())
    }
}

/// `(alpha: L, theta: q_z x L, gamma: M x L)` from `B`.
pub fn decompose_coefficients(
    b: &DMatrix<f64>,
    design: &DesignSpec,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    design.check(b.nrows())?;
    let l = b.ncols();
    let m = design.n_sites();
    let effect = DMatrix::from_fn(m, l, |i, k| {
        let base = design.intercept.map_or(0.0, |c| b[(c, k)]);
        base + design.site_columns[i].map_or(0.0, |c| b[(c, k)])
    });
    let alpha = DVector::from_fn(l, |k, _| {
        if m == 0 {
            0.0
        } else {
            effect.column(k).sum() / m as f64
        }
    });
    let gamma = DMatrix::from_fn(m, l, |i, k| effect[(i, k)] - alpha[k]);
    let theta = DMatrix::from_fn(design.biological_columns.len(), l, |r, k| {
        b[(design.biological_columns[r], k)]
    });
    Ok((alpha, theta, gamma))
}

/// `sigma_h,l = sqrt(sum n_i sigma_il^2 / n)` and `phi_h = sqrt(sum n_i phi_i^2 / n)`.
pub fn pooled_scales(
    sigma2: &DMatrix<f64>,
    phi2: &DVector<f64>,
    site_sizes: &[usize],
) -> (DVector<f64>, f64) {
    let n: usize = site_sizes.iter().sum();
    let n = n as f64;
    let sigma_h = DVector::from_fn(sigma2.ncols(), |k, _| {
        let s: f64 = site_sizes
            .iter()
            .enumerate()
            .map(|(i, &ni)| ni as f64 * sigma2[(i, k)])
            .sum();
        (s / n).sqrt()
    });
    let phi: f64 = site_sizes
        .iter()
        .enumerate()
        .map(|(i, &ni)| ni as f64 * phi2[i])
        .sum();
    (sigma_h, (phi / n).sqrt())
}

/// Everything needed to harmonize data under a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationModel {
    pub design: DesignSpec,
    pub alpha: DVector<f64>,
    pub theta_z: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub sigma_h: DVector<f64>,
    pub phi_h: f64,
    /// Training subjects per site, used for the pooled scales.
    pub site_sizes: Vec<usize>,
}

impl HarmonizationModel {
    pub fn new(theta: &ParameterSet, design: &DesignSpec, site_sizes: &[usize]) -> Result<Self> {
        if design.n_sites() != theta.n_sites() || site_sizes.len() != theta.n_sites() {
            return Err(SlaccError::Dimension(format!(
                "model has {} sites, design {} and site sizes {}",
                theta.n_sites(),
                design.n_sites(),
                site_sizes.len()
            )));
        }
        let (alpha, theta_z, gamma) = decompose_coefficients(&theta.b, design)?;
        let (sigma_h, phi_h) = pooled_scales(&theta.sigma2, &theta.phi2, site_sizes);
        Ok(Self {
            design: design.clone(),
            alpha,
            theta_z,
            gamma,
            sigma_h,
            phi_h,
            site_sizes: site_sizes.to_vec(),
        })
    }

    /// `alpha_l + z^T theta_l` for one covariate row.
    fn biological_mean(&self, x: &[f64]) -> DVector<f64> {
        let mut m = self.alpha.clone();
        for (r, &c) in self.design.biological_columns.iter().enumerate() {
            for k in 0..m.len() {
                m[k] += x[c] * self.theta_z[(r, k)];
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct HarmonizedOutput {
    pub a_h: DMatrix<f64>,
    pub e_h: Vec<DMatrix<f64>>,
    pub y_h: Vec<DMatrix<f64>>,
    pub sigma_h: DVector<f64>,
    pub phi_h: f64,
}

fn check_sites(theta: &ParameterSet, data: &ConnectivityDataset) -> Result<()> {
    if let Some(&bad) = data.sites().iter().find(|&&s| s >= theta.n_sites()) {
        return Err(SlaccError::UnseenSite(bad));
    }
    Ok(())
}

/// Corrected scores for every subject.
pub fn harmonize_scores(
    a_hat: &DMatrix<f64>,
    theta: &ParameterSet,
    model: &HarmonizationModel,
    data: &ConnectivityDataset,
) -> Result<DMatrix<f64>> {
    check_sites(theta, data)?;
    let l = theta.l();
    let mut a_h = DMatrix::zeros(data.n(), l);
    for j in 0..data.n() {
        let i = data.site(j);
        let x: Vec<f64> = data.covariates().row(j).iter().copied().collect();
        let bio = model.biological_mean(&x);
        for k in 0..l {
            let scale = model.sigma_h[k] / theta.sigma2[(i, k)].sqrt();
            let centered = a_hat[(j, k)] - bio[k] - model.gamma[(i, k)];
            a_h[(j, k)] = scale * centered + bio[k];
        }
    }
    Ok(a_h)
}

fn drop_diagonal(mut m: DMatrix<f64>, mode: DiagonalMode) -> DMatrix<f64> {
    if mode == DiagonalMode::Exclude {
        m.fill_diagonal(0.0);
    }
    m
}

/// `phi_h / phi_i * (Y - sum_l a_l u_l u_l^T)` for every subject.
pub fn harmonize_residuals(
    data: &ConnectivityDataset,
    theta: &ParameterSet,
    a_hat: &DMatrix<f64>,
    phi_h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    check_sites(theta, data)?;
    let mode = data.mode();
    Ok((0..data.n())
        .into_par_iter()
        .map(|j| {
            let a: Vec<f64> = a_hat.row(j).iter().copied().collect();
            let fitted = reconstruct(&theta.u, &a);
            let resid = drop_diagonal(data.matrix(j) - fitted, mode);
            resid * (phi_h / theta.phi2[data.site(j)].sqrt())
        })
        .collect())
}

/// Scores, residuals and reconstructed matrices from given posterior means.
pub fn harmonize_with_scores(
    theta: &ParameterSet,
    model: &HarmonizationModel,
    data: &ConnectivityDataset,
    a_hat: &DMatrix<f64>,
) -> Result<HarmonizedOutput> {
    let a_h = harmonize_scores(a_hat, theta, model, data)?;
    let e_h = harmonize_residuals(data, theta, a_hat, model.phi_h)?;
    let mode = data.mode();
    let y_h = (0..data.n())
        .into_par_iter()
        .map(|j| {
            let a: Vec<f64> = a_h.row(j).iter().copied().collect();
            drop_diagonal(reconstruct(&theta.u, &a), mode) + &e_h[j]
        })
        .collect();
    Ok(HarmonizedOutput {
        a_h,
        e_h,
        y_h,
        sigma_h: model.sigma_h.clone(),
        phi_h: model.phi_h,
    })
}

/// Scores `data` under the fitted model, then harmonizes.
pub fn harmonize_external(
    theta: &ParameterSet,
    model: &HarmonizationModel,
    data: &ConnectivityDataset,
) -> Result<HarmonizedOutput> {
    if data.n() == 0 {
        return Ok(HarmonizedOutput {
            a_h: DMatrix::zeros(0, theta.l()),
            e_h: Vec::new(),
            y_h: Vec::new(),
            sigma_h: model.sigma_h.clone(),
            phi_h: model.phi_h,
        });
    }
    check_sites(theta, data)?;
    if data.v() != theta.v() || data.q() != theta.q() {
        return Err(SlaccError::Dimension(format!(
            "model expects V = {}, q = {}; data have V = {}, q = {}",
            theta.v(),
            theta.q(),
            data.v(),
            data.q()
        )));
    }
    let scoring = if data.n_sites() == theta.n_sites() {
        data.clone()
    } else {
        let options = crate::dataset::DatasetOptions {
            symmetrize_all: false,
            n_sites: Some(theta.n_sites()),
        };
        ConnectivityDataset::with_options(
            data.matrices().to_vec(),
            data.sites().to_vec(),
            data.covariates().clone(),
            data.mode(),
            options,
        )?
    };
    let post = estep(theta, &scoring)?;
    harmonize_with_scores(theta, model, &scoring, &post.a_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn site_coefficients_center() {
        let b = dmatrix![1.0; 0.3; -0.3];
        let design = DesignSpec::one_hot(1, 2);
        let (alpha, theta, gamma) = decompose_coefficients(&b, &design).unwrap();
        assert_eq!(alpha[0], 0.0);
        assert_eq!(theta, dmatrix![1.0]);
        assert_eq!(gamma, dmatrix![0.3; -0.3]);
    }

    #[test]
    fn single_site_has_no_gamma() {
        let b = dmatrix![0.5, 1.0; 2.0, -1.0];
        let (alpha, _, gamma) = decompose_coefficients(&b, &DesignSpec::one_hot(1, 1)).unwrap();
        assert_eq!(alpha, DVector::from_vec(vec![2.0, -1.0]));
        assert!(gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reference_coding_with_intercept() {
        let design = DesignSpec {
            biological_columns: vec![1],
            site_columns: vec![None, Some(2)],
            intercept: Some(0),
        };
        let b = dmatrix![1.0; 0.5; 0.4];
        let (alpha, _, gamma) = decompose_coefficients(&b, &design).unwrap();
        assert!((alpha[0] - 1.2).abs() < 1e-15);
        assert!((gamma[(0, 0)] + 0.2).abs() < 1e-15);
        assert!((gamma[(1, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn design_must_partition_columns() {
        let mut d = DesignSpec::one_hot(2, 2);
        assert!(d.check(4).is_ok());
        assert!(d.check(5).is_err());
        d.biological_columns = vec![0, 2];
        assert!(d.check(4).is_err());
    }

    #[test]
    fn pooled_scale_examples() {
        let phi2 = DVector::from_vec(vec![1.0, 1.0]);
        let (s, _) = pooled_scales(&dmatrix![1.0; 1.0], &phi2, &[10, 10]);
        assert_eq!(s[0], 1.0);
        let (s, _) = pooled_scales(&dmatrix![1.0; 3.0], &phi2, &[10, 10]);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
        let sim = DMatrix::from_fn(2, 5, |i, k| if i == 0 { k as f64 + 1.0 } else { 5.0 - k as f64 });
        let (s, phi) = pooled_scales(&sim, &DVector::from_vec(vec![1.2, 0.8]), &[250, 250]);
        for k in 0..5 {
            assert!((s[k] - 3f64.sqrt()).abs() < 1e-15);
        }
        assert!((phi - 1.0).abs() < 1e-15);
    }
}
