//! Closed-form M-step updates for `B`, `sigma^2` and `phi^2`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::dataset::ConnectivityDataset;
use crate::error::{Result, SlaccError};

/// Weighted least squares for each column of `B`:
/// `beta_l = (sum x x^T / sigma_il^2)^{-1} sum x a_l / sigma_il^2`.
pub fn update_beta(
    a_hat: &DMatrix<f64>,
    x: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    sites: &[usize],
) -> Result<DMatrix<f64>> {
    let (n, q) = (x.nrows(), x.ncols());
    let l = a_hat.ncols();
    if a_hat.nrows() != n || sites.len() != n {
        return Err(SlaccError::Dimension(format!(
            "a_hat has {} rows, X has {n}, {} site labels",
            a_hat.nrows(),
            sites.len()
        )));
    }
    let m = sigma2.nrows();
    // Per-site X_i^T X_i and X_i^T a_i.
    let mut xtx = vec![DMatrix::<f64>::zeros(q, q); m];
    let mut xta = vec![DMatrix::<f64>::zeros(q, l); m];
    for j in 0..n {
        let i = sites[j];
        if i >= m {
            return Err(SlaccError::UnseenSite(i));
        }
        let row = x.row(j);
        xtx[i].ger(1.0, &row.transpose(), &row.transpose(), 1.0);
        for k in 0..l {
            let a = a_hat[(j, k)];
            for c in 0..q {
                xta[i][(c, k)] += row[c] * a;
            }
        }
    }
    let mut b = DMatrix::zeros(q, l);
    for k in 0..l {
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for i in 0..m {
            let w = 1.0 / sigma2[(i, k)];
            gram += &xtx[i] * w;
            rhs += xta[i].column(k) * w;
        }
        let chol = Cholesky::new(gram).ok_or(SlaccError::SingularGram)?;
        let beta = chol.solve(&rhs);
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(SlaccError::SingularGram);
        }
        b.set_column(k, &beta);
    }
    Ok(b)
}

/// Diagonal of the site-wise conditional second moment
/// `(1/n_i) sum_j [(a_j - B^T x_j)(a_j - B^T x_j)^T + Q_i]`, floored.
pub fn update_sigma2(
    a_hat: &DMatrix<f64>,
    q: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    x: &DMatrix<f64>,
    sites: &[usize],
    floor: f64,
) -> DMatrix<f64> {
    let m = q.len();
    let l = a_hat.ncols();
    let mut acc = DMatrix::<f64>::zeros(m, l);
    let mut counts = vec![0usize; m];
    let fitted = x * b;
    for (j, &i) in sites.iter().enumerate() {
        counts[i] += 1;
        for k in 0..l {
            let r = a_hat[(j, k)] - fitted[(j, k)];
            acc[(i, k)] += r * r;
        }
    }
    DMatrix::from_fn(m, l, |i, k| {
        let ni = counts[i].max(1) as f64;
        (acc[(i, k)] / ni + q[i][(k, k)]).max(floor)
    })
}

/// Residual variance per site:
/// `(1/(n_i p)) sum_j ||y_j - S a_j||^2 + tr(S^T S Q_i) / p`, floored.
///
/// `gram` is `S^T S` and `proj` holds `S^T y_j` in its rows, both for the
/// loadings being scored.
pub fn update_phi2(
    data: &ConnectivityDataset,
    gram: &DMatrix<f64>,
    proj: &DMatrix<f64>,
    a_hat: &DMatrix<f64>,
    q: &[DMatrix<f64>],
    floor: f64,
) -> DVector<f64> {
    let m = data.n_sites();
    let p = data.p() as f64;
    let mut acc = vec![0.0; m];
    for j in 0..data.n() {
        let a = a_hat.row(j).transpose();
        let sty = proj.row(j).transpose();
        let resid = data.norm_sq(j) - 2.0 * a.dot(&sty) + a.dot(&(gram * &a));
        acc[data.site(j)] += resid;
    }
    let sizes = data.site_sizes();
    DVector::from_fn(m, |i, _| {
        let trace = (gram * &q[i]).trace();
        let ni = sizes[i] as f64;
        // the trace term is the same for every subject of the site
        (acc[i] / (ni * p) + trace / p).max(floor)
    })
}
