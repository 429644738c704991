//! Extended BIC and the choice of the number of factors.

use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::dataset::ConnectivityDataset;
use crate::em::{fit, FitResult};
use crate::error::{Result, SlaccError};
use crate::params::ParameterSet;

pub const DEFAULT_GAMMA: f64 = 0.5;

/// `qL + ML + M + ||U||_0`.
pub fn degrees_of_freedom(theta: &ParameterSet) -> usize {
    let l = theta.l();
    theta.q() * l + theta.n_sites() * l + theta.n_sites() + theta.nnz_u()
}

/// `2 * nll_total + (log n + 2 gamma log p) * df`.
pub fn ebic_from_parts(nll_total: f64, df: usize, n: usize, p: usize, gamma: f64) -> f64 {
    2.0 * nll_total + ((n as f64).ln() + 2.0 * gamma * (p as f64).ln()) * df as f64
}

pub fn ebic(theta: &ParameterSet, data: &ConnectivityDataset, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let nll = crate::likelihood::nll(theta, data)?;
    Ok(ebic_from_parts(
        nll.total,
        degrees_of_freedom(theta),
        data.n(),
        data.p(),
        gamma,
    ))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(SlaccError::InvalidInput(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// One point of the selection curve. `error` is set when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub l: usize,
    pub nll: f64,
    pub df: usize,
    pub ebic: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best_l: usize,
    pub curve: Vec<CurvePoint>,
    pub best_fit: FitResult,
}

/// Fits every `L` in the grid from its own initialization and returns the
/// minimizer of EBIC, preferring the smaller `L` on ties.
pub fn select_l(
    data: &ConnectivityDataset,
    grid: &[usize],
    gamma: f64,
    cfg: &FitConfig,
) -> Result<Selection> {
    if grid.is_empty() {
        return Err(SlaccError::InvalidInput("empty grid of L values".into()));
    }
    check_gamma(gamma)?;
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, FitResult)> = None;
    for &l in &grid {
        match fit(data, l, cfg) {
            Ok(res) => {
                let df = degrees_of_freedom(&res.theta);
                let score = ebic_from_parts(res.nll.total, df, data.n(), data.p(), gamma);
                log::info!("L = {l}: nll = {}, df = {df}, EBIC = {score}", res.nll.total);
                curve.push(CurvePoint {
                    l,
                    nll: res.nll.total,
                    df,
                    ebic: score,
                    converged: res.converged,
                    error: None,
                });
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, res));
                }
            }
            Err(e) => {
                log::warn!("L = {l}: fit failed: {e}");
                curve.push(CurvePoint {
                    l,
                    nll: f64::NAN,
                    df: 0,
                    ebic: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (_, best_fit) =
        best.ok_or_else(|| SlaccError::Numerical("every fit in the grid failed".into()))?;
    let best_l = curve
        .iter()
        .filter(|c| c.error.is_none())
        .min_by(|a, b| a.ebic.total_cmp(&b.ebic).then(a.l.cmp(&b.l)))
        .map(|c| c.l)
        .unwrap_or(best_fit.theta.l());
    Ok(Selection {
        best_l,
        curve,
        best_fit,
    })
}
