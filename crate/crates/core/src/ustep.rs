//! Penalized update of the loading matrix `U`.
//!
//! The bilinear loss is split with a consensus copy `U*`:
//!
//! ```text
//! f(U, U*) = sum_ij w_ij / 2 { ||Y_ij - U* Pi_ij U^T||_F^2 + tr((U*^T U* o U^T U) Q_i) }
//! min f(U, U*) + lam ||C o Z||_1 + lam ||C* o Z*||_1   s.t.  U = Z, U* = Z*, U = U*
//! ```
//!
//! with `w_ij = 1 / phi_i^2`, `Pi_ij = diag(a_hat_ij)` and TLP weights
//! `C_vl = 1{|u_vl| <= tau} / tau` frozen at the previous EM iterate.
//! For fixed `U*` the loss is quadratic in `U`, so each half-step is an
//! `L x L` linear solve; `Z`, `Z*` are soft-thresholded and the scaled duals
//! take a plain ascent step.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{AdmmConfig, UObjective};
use crate::dataset::ConnectivityDataset;
use crate::params::PosteriorMoments;

/// `C_vl = 1{|u_vl| <= tau} / tau`.
pub fn tlp_weights(u_prev: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    u_prev.map(|x| if x.abs() <= tau { 1.0 / tau } else { 0.0 })
}

/// `sign(x) * max(|x| - kappa, 0)`.
pub fn soft_threshold(x: f64, kappa: f64) -> f64 {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        0.0
    }
}

/// Data summaries the loading update needs, fixed within one EM iteration.
#[derive(Debug, Clone)]
pub struct UStepStats {
    /// `sum_ij w_ij a_ij a_ij^T`.
    pub a2: DMatrix<f64>,
    /// `ybar[l] = sum_ij w_ij a_ijl Y_ij`; column `l` of `H` is `ybar[l] u*_l`.
    pub ybar: Vec<DMatrix<f64>>,
    /// `sum_ij w_ij Q_i`, i.e. `w_sum * Qbar`.
    pub qw: DMatrix<f64>,
    pub w_sum: f64,
    pub n: usize,
    /// `sum_ij w_ij ||Y_ij||_F^2`.
    fro_const: f64,
    /// `sum_ij w_ij sum_v Y_ij,vv^2`.
    diag_const: f64,
    /// 0 for the Frobenius loss, +-1 for the vectorized one.
    diag_sign: f64,
}

impl UStepStats {
    pub fn new(
        data: &ConnectivityDataset,
        post: &PosteriorMoments,
        phi2: &DVector<f64>,
        objective: UObjective,
    ) -> Self {
        let l = post.a_hat.ncols();
        let n = data.n();
        let w: Vec<f64> = (0..n).map(|j| 1.0 / phi2[data.site(j)]).collect();
        let w_sum: f64 = w.iter().sum();
        let mut a2 = DMatrix::zeros(l, l);
        for j in 0..n {
            let a = post.a_hat.row(j).transpose();
            a2.ger(w[j], &a, &a, 1.0);
        }
        let mut qw = DMatrix::zeros(l, l);
        for (i, q) in post.q.iter().enumerate() {
            let wi: f64 = data.site_members(i).iter().map(|&j| w[j]).sum();
            qw += q * wi;
        }
        let v = data.v();
        let ybar: Vec<DMatrix<f64>> = (0..l)
            .into_par_iter()
            .map(|k| {
                let mut acc = DMatrix::zeros(v, v);
                for j in 0..n {
                    let c = w[j] * post.a_hat[(j, k)];
                    if c != 0.0 {
                        acc += data.matrix(j) * c;
                    }
                }
                acc
            })
            .collect();
        let mut fro_const = 0.0;
        let mut diag_const = 0.0;
        for j in 0..n {
            let y = data.matrix(j);
            fro_const += w[j] * y.norm_squared();
            diag_const += w[j] * y.diagonal().iter().map(|d| d * d).sum::<f64>();
        }
        let diag_sign = match objective {
            UObjective::Frobenius => 0.0,
            UObjective::Vectorized => data.mode().sign(),
        };
        Self {
            a2,
            ybar,
            qw,
            w_sum,
            n,
            fro_const,
            diag_const,
            diag_sign,
        }
    }

    pub fn l(&self) -> usize {
        self.a2.nrows()
    }

    /// Weighted average posterior covariance.
    pub fn qbar(&self) -> DMatrix<f64> {
        &self.qw / self.w_sum
    }

    /// `H = sum_ij w_ij Y_ij U* Pi_ij`, assembled column by column.
    pub fn h(&self, u_star: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(u_star.nrows(), u_star.ncols());
        for (k, yb) in self.ybar.iter().enumerate() {
            h.set_column(k, &(yb * u_star.column(k)));
        }
        h
    }

    /// `A2 o (U*^T U*)`, equal to `sum w Pi (U*^T U*) Pi`.
    pub fn g(&self, u_star: &DMatrix<f64>) -> DMatrix<f64> {
        self.a2.component_mul(&u_star.tr_mul(u_star))
    }

    /// Smooth part `f(U, U*)` evaluated from the summaries.
    pub fn smooth_objective(&self, u: &DMatrix<f64>, u_star: &DMatrix<f64>) -> f64 {
        let l = u.ncols();
        let mut cross = 0.0;
        for k in 0..l {
            cross += u.column(k).dot(&(&self.ybar[k] * u_star.column(k)));
        }
        let sts = u_star.tr_mul(u_star);
        let utu = u.tr_mul(u);
        let m = &self.a2 + &self.qw;
        let quartic = m.component_mul(&sts).component_mul(&utu).sum();
        let mut total = self.fro_const - 2.0 * cross + quartic;
        if self.diag_sign != 0.0 {
            let mut d = self.diag_const;
            for v in 0..u.nrows() {
                let pv = DVector::from_fn(l, |k, _| u_star[(v, k)] * u[(v, k)]);
                for k in 0..l {
                    d -= 2.0 * self.ybar[k][(v, v)] * pv[k];
                }
                d += pv.dot(&(&m * &pv));
            }
            total += self.diag_sign * d;
        }
        0.5 * total
    }

    /// Gradient of `f(U, U*)` with respect to its first argument.
    pub fn gradient(&self, u: &DMatrix<f64>, u_star: &DMatrix<f64>) -> DMatrix<f64> {
        let k0 = (&self.a2 + &self.qw).component_mul(&u_star.tr_mul(u_star));
        let mut grad = u * k0 - self.h(u_star);
        if self.diag_sign != 0.0 {
            let m = &self.a2 + &self.qw;
            for v in 0..u.nrows() {
                let (row_k, row_rhs) = self.row_correction(&m, u_star, v);
                let uv = u.row(v).transpose();
                let extra = row_k * uv - row_rhs;
                for k in 0..u.ncols() {
                    grad[(v, k)] += self.diag_sign * extra[k];
                }
            }
        }
        grad
    }

    fn row_correction(
        &self,
        m: &DMatrix<f64>,
        u_star: &DMatrix<f64>,
        v: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let l = u_star.ncols();
        let us = u_star.row(v).transpose();
        let k = DMatrix::from_fn(l, l, |a, b| m[(a, b)] * us[a] * us[b]);
        let rhs = DVector::from_fn(l, |a, _| self.ybar[a][(v, v)] * us[a]);
        (k, rhs)
    }
}

/// Direct evaluation of `f(U, U*)` subject by subject.
///
/// With `U* = U` and the Frobenius loss, half of this value is the
/// unpenalized loading objective of the EM.
pub fn unpenalized_objective(
    u: &DMatrix<f64>,
    u_star: &DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
    objective: UObjective,
) -> f64 {
    let l = u.ncols();
    let sts = u_star.tr_mul(u_star);
    let utu = u.tr_mul(u);
    let mixed = sts.component_mul(&utu);
    let diag_sign = match objective {
        UObjective::Frobenius => 0.0,
        UObjective::Vectorized => data.mode().sign(),
    };
    let mut total = 0.0;
    for j in 0..data.n() {
        let i = data.site(j);
        let w = 1.0 / phi2[i];
        let a: Vec<f64> = post.a_hat.row(j).iter().copied().collect();
        let mut scaled = u_star.clone();
        for (k, ak) in a.iter().enumerate() {
            scaled.column_mut(k).scale_mut(*ak);
        }
        let resid = data.matrix(j) - &scaled * u.transpose();
        let mut term = resid.norm_squared() + mixed.component_mul(&post.q[i]).sum();
        if diag_sign != 0.0 {
            let mut d = 0.0;
            for v in 0..u.nrows() {
                let pv = DVector::from_fn(l, |k, _| u_star[(v, k)] * u[(v, k)]);
                d += resid[(v, v)] * resid[(v, v)] + pv.dot(&(&post.q[i] * &pv));
            }
            term += diag_sign * d;
        }
        total += 0.5 * w * term;
    }
    total
}

/// Linear system `U K = RHS` for the `U` half-step (Frobenius loss):
/// `K = G + (rho + eta) I + w_sum (U*^T U* o Qbar)`,
/// `RHS = H + rho (Z - W) + eta (U* - Lambda)`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_u_system(
    u_star: &DMatrix<f64>,
    stats: &UStepStats,
    rho: f64,
    eta: f64,
    z: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let sts = u_star.tr_mul(u_star);
    let mut k = stats.a2.component_mul(&sts) + stats.qw.component_mul(&sts);
    for d in 0..k.nrows() {
        k[(d, d)] += rho + eta;
    }
    let rhs = stats.h(u_star) + (z - w) * rho + (u_star - lambda) * eta;
    (k, rhs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmmStatus {
    Converged,
    MaxIter,
    /// Non-finite iterates; the input loadings were returned unchanged.
    Diverged,
}

impl std::fmt::Display for AdmmStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdmmStatus::Converged => "converged",
            AdmmStatus::MaxIter => "max_iter",
            AdmmStatus::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub u: DMatrix<f64>,
    pub status: AdmmStatus,
    pub iterations: usize,
    /// `||U - U*||_F` at exit.
    pub consensus_residual: f64,
    /// `f(U, U*) + lam ||C o Z||_1 + lam ||C* o Z*||_1` per iteration.
    pub objective_trace: Vec<f64>,
}

/// Full ADMM state, exposed for inspection in tests.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub u: DMatrix<f64>,
    pub u_star: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub z_star: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_star: DMatrix<f64>,
    pub lambda_dual: DMatrix<f64>,
    pub rho: f64,
    pub eta: f64,
    pub lambda: f64,
    pub c: DMatrix<f64>,
    pub c_star: DMatrix<f64>,
}

/// Default ADMM penalty: the larger of 1, the mean data weight and the
/// average diagonal curvature of the loss at the starting point.
pub fn default_penalty(stats: &UStepStats, u: &DMatrix<f64>) -> f64 {
    let l = u.ncols().max(1) as f64;
    let k0 = (&stats.a2 + &stats.qw).component_mul(&u.tr_mul(u));
    let curvature = k0.trace() / l;
    let w_mean = stats.w_sum / stats.n.max(1) as f64;
    1f64.max(w_mean).max(curvature)
}

fn solve_half(
    stats: &UStepStats,
    partner: &DMatrix<f64>,
    prox: &DMatrix<f64>,
    rho_eta: f64,
) -> Option<DMatrix<f64>> {
    let l = partner.ncols();
    let sts = partner.tr_mul(partner);
    let m = &stats.a2 + &stats.qw;
    let mut k = m.component_mul(&sts);
    for d in 0..l {
        k[(d, d)] += rho_eta;
    }
    let rhs = stats.h(partner) + prox;
    if stats.diag_sign == 0.0 {
        let chol = Cholesky::new(k)?;
        let ut = chol.solve(&rhs.transpose());
        return Some(ut.transpose());
    }
    let mut out = DMatrix::zeros(partner.nrows(), l);
    for v in 0..partner.nrows() {
        let (kc, rc) = stats.row_correction(&m, partner, v);
        let kv = &k + kc * stats.diag_sign;
        let rv = rhs.row(v).transpose() + rc * stats.diag_sign;
        let chol = Cholesky::new(kv)?;
        out.set_row(v, &chol.solve(&rv).transpose());
    }
    Some(out)
}

impl AdmmState {
    pub fn new(
        u_init: &DMatrix<f64>,
        stats: &UStepStats,
        lambda: f64,
        c: DMatrix<f64>,
        c_star: DMatrix<f64>,
        cfg: &AdmmConfig,
    ) -> Self {
        let auto = default_penalty(stats, u_init);
        let zeros = DMatrix::zeros(u_init.nrows(), u_init.ncols());
        Self {
            u: u_init.clone(),
            u_star: u_init.clone(),
            z: u_init.clone(),
            z_star: u_init.clone(),
            w: zeros.clone(),
            w_star: zeros.clone(),
            lambda_dual: zeros,
            rho: cfg.rho.unwrap_or(auto),
            eta: cfg.eta.unwrap_or(auto),
            lambda,
            c,
            c_star,
        }
    }

    /// One sweep: `U`, `U*`, `Z`, `Z*`, then the three dual steps.
    /// Returns `false` if a linear solve failed or an iterate is not finite.
    pub fn step(&mut self, stats: &UStepStats) -> bool {
        let (rho, eta) = (self.rho, self.eta);
        let prox = (&self.z - &self.w) * rho + (&self.u_star - &self.lambda_dual) * eta;
        let Some(u) = solve_half(stats, &self.u_star, &prox, rho + eta) else {
            return false;
        };
        self.u = u;
        let prox = (&self.z_star - &self.w_star) * rho + (&self.u + &self.lambda_dual) * eta;
        let Some(us) = solve_half(stats, &self.u, &prox, rho + eta) else {
            return false;
        };
        self.u_star = us;
        let scale = self.lambda / rho;
        self.z = DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |r, c| {
            soft_threshold(self.u[(r, c)] + self.w[(r, c)], scale * self.c[(r, c)])
        });
        self.z_star = DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |r, c| {
            soft_threshold(
                self.u_star[(r, c)] + self.w_star[(r, c)],
                scale * self.c_star[(r, c)],
            )
        });
        self.w += &self.u - &self.z;
        self.w_star += &self.u_star - &self.z_star;
        self.lambda_dual += &self.u - &self.u_star;
        self.u.iter().chain(self.u_star.iter()).all(|x| x.is_finite())
    }

    /// Penalized objective at the current iterate.
    pub fn objective(&self, stats: &UStepStats) -> f64 {
        let pen = self.c.component_mul(&self.z.abs()).sum()
            + self.c_star.component_mul(&self.z_star.abs()).sum();
        stats.smooth_objective(&self.u, &self.u_star) + self.lambda * pen
    }

    /// Consensus estimate with exact zeros where both `Z` and `Z*` vanish.
    pub fn consensus(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |r, c| {
            if self.z[(r, c)] == 0.0 && self.z_star[(r, c)] == 0.0 {
                0.0
            } else {
                0.5 * (self.u[(r, c)] + self.u_star[(r, c)])
            }
        })
    }
}

/// Runs the consensus ADMM from `u_init` with TLP weights `c` (for `U`) and
/// `c_star` (for `U*`).
pub fn admm_with_stats(
    u_init: &DMatrix<f64>,
    stats: &UStepStats,
    lambda: f64,
    c: DMatrix<f64>,
    c_star: DMatrix<f64>,
    cfg: &AdmmConfig,
) -> AdmmOutcome {
    let (v, l) = (u_init.nrows(), u_init.ncols());
    if l == 0 {
        return AdmmOutcome {
            u: u_init.clone(),
            status: AdmmStatus::Converged,
            iterations: 0,
            consensus_residual: 0.0,
            objective_trace: Vec::new(),
        };
    }
    let (primal_tol, dual_tol) = cfg.tolerances(v, l);
    let mut state = AdmmState::new(u_init, stats, lambda, c, c_star, cfg);
    let mut trace = Vec::new();
    let mut status = AdmmStatus::MaxIter;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        let z_prev = state.z.clone();
        let zs_prev = state.z_star.clone();
        iterations += 1;
        if !state.step(stats) {
            status = AdmmStatus::Diverged;
            break;
        }
        trace.push(state.objective(stats));
        let primal = (&state.u - &state.z)
            .norm()
            .max((&state.u_star - &state.z_star).norm())
            .max((&state.u - &state.u_star).norm());
        let dual = (&state.z - &z_prev).norm().max((&state.z_star - &zs_prev).norm());
        if primal < primal_tol && dual < dual_tol {
            status = AdmmStatus::Converged;
            break;
        }
    }
    if status == AdmmStatus::Diverged {
        return AdmmOutcome {
            u: u_init.clone(),
            status,
            iterations,
            consensus_residual: f64::NAN,
            objective_trace: trace,
        };
    }
    AdmmOutcome {
        u: state.consensus(),
        status,
        iterations,
        consensus_residual: (&state.u - &state.u_star).norm(),
        objective_trace: trace,
    }
}

/// Loading update for one EM iteration: TLP weights from `u_init`, then ADMM.
#[allow(clippy::too_many_arguments)]
pub fn admm_solve(
    u_init: &DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
    lambda: f64,
    tau: f64,
    cfg: &AdmmConfig,
    objective: UObjective,
) -> AdmmOutcome {
    let stats = UStepStats::new(data, post, phi2, objective);
    let c = tlp_weights(u_init, tau);
    admm_with_stats(u_init, &stats, lambda, c.clone(), c, cfg)
}
