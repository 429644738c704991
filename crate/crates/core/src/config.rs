use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaccError};

/// Which smooth objective the loading update minimizes.
///
/// `Frobenius` is the full-matrix loss `||Y - U* Pi U^T||_F^2 / (2 phi^2)`.
/// `Vectorized` weights each distinct entry exactly once, as the likelihood
/// does, which adds a row-separable diagonal correction to the linear system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UObjective {
    Frobenius,
    #[default]
    Vectorized,
}

/// Settings for the inner consensus ADMM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Penalty for `U = Z`; `None` scales with the data curvature.
    pub rho: Option<f64>,
    /// Penalty for `U = U*`; `None` uses the same rule as `rho`.
    pub eta: Option<f64>,
    pub max_iter: usize,
    /// `None` means `1e-6 * sqrt(V L)`.
    pub primal_tol: Option<f64>,
    /// `None` means `1e-6 * sqrt(V L)`.
    pub dual_tol: Option<f64>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: None,
            eta: None,
            max_iter: 200,
            primal_tol: None,
            dual_tol: None,
        }
    }
}

impl AdmmConfig {
    pub fn tolerances(&self, v: usize, l: usize) -> (f64, f64) {
        let default = 1e-6 * ((v * l) as f64).sqrt();
        (
            self.primal_tol.unwrap_or(default),
            self.dual_tol.unwrap_or(default),
        )
    }
}

/// Everything that controls a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Cap on penalized EM iterations (after warm-up).
    pub max_em_iter: usize,
    /// Stop when `||U_t - U_{t-1}||_F < em_tol`.
    pub em_tol: f64,
    /// Cap on the unpenalized warm-up iterations.
    pub warmup_iters: usize,
    /// Length of the linear penalty ramp.
    pub anneal_iters: usize,
    /// TLP width; `None` means `0.5 * sqrt(log(V L) / n)`.
    pub tau: Option<f64>,
    /// Per-side penalty weight at the end of the ramp; `None` means `log(n) / 2`.
    pub lambda_max: Option<f64>,
    pub admm: AdmmConfig,
    pub seed: u64,
    pub variance_floor: f64,
    pub u_objective: UObjective,
    /// Columns of `U` whose norm falls below this after a loading update are zeroed.
    pub dead_column_tol: f64,
    /// Fit even when `L >= V`.
    pub force: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iter: 500,
            em_tol: 1e-4,
            warmup_iters: 500,
            anneal_iters: 20,
            tau: None,
            lambda_max: None,
            admm: AdmmConfig::default(),
            seed: 0,
            variance_floor: 1e-8,
            u_objective: UObjective::default(),
            dead_column_tol: 1e-8,
            force: false,
        }
    }
}

/// Default TLP width for the given dimensions.
pub fn default_tau(v: usize, l: usize, n: usize) -> f64 {
    0.5 * (((v * l) as f64).ln() / n as f64).sqrt()
}

/// Default per-side penalty weight, `log(n) / 2`.
pub fn default_lambda(n: usize) -> f64 {
    (n as f64).ln() / 2.0
}

impl FitConfig {
    /// Configuration for the unpenalized variant.
    pub fn unpenalized() -> Self {
        Self {
            lambda_max: Some(0.0),
            ..Self::default()
        }
    }

    pub fn tau_for(&self, v: usize, l: usize, n: usize) -> f64 {
        self.tau.unwrap_or_else(|| default_tau(v, l, n))
    }

    pub fn lambda_for(&self, n: usize) -> f64 {
        self.lambda_max.unwrap_or_else(|| default_lambda(n))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("em_tol", self.em_tol),
            ("variance_floor", self.variance_floor),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(SlaccError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(SlaccError::InvalidInput("tau must be positive".into()));
            }
        }
        if let Some(l) = self.lambda_max {
            if !(l >= 0.0) {
                return Err(SlaccError::InvalidInput("lambda_max must be >= 0".into()));
            }
        }
        for (name, value) in [
            ("admm.rho", self.admm.rho),
            ("admm.eta", self.admm.eta),
            ("admm.primal_tol", self.admm.primal_tol),
            ("admm.dual_tol", self.admm.dual_tol),
        ] {
            if let Some(x) = value {
                if !(x > 0.0) {
                    return Err(SlaccError::InvalidInput(format!("{name} must be positive")));
                }
            }
        }
        if self.anneal_iters > self.max_em_iter {
            return Err(SlaccError::InvalidInput(
                "anneal_iters must not exceed max_em_iter".into(),
            ));
        }
        Ok(())
    }
}
