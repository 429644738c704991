//! Penalized EM: initialization, warm-up, annealed penalty, canonical form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::FitConfig;
use crate::dataset::{ConnectivityDataset, Violation};
use crate::error::{Result, SlaccError};
use crate::estep::estep_with;
use crate::likelihood::{nll_with, project_all, Nll};
use crate::mstep::{update_beta, update_phi2, update_sigma2};
use crate::params::{ParameterSet, PosteriorMoments};
use crate::symmetric::loading_gram;
use crate::ustep::{admm_with_stats, tlp_weights, AdmmStatus, UStepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Penalized,
    Fixed,
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub lambda: f64,
    pub nll: f64,
    pub nll_total: f64,
    pub delta_u: f64,
    pub admm_status: Option<String>,
    pub admm_iterations: usize,
    pub nnz_u: usize,
    pub l: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Canonical parameters.
    pub theta: ParameterSet,
    /// Posterior moments under `theta`.
    pub posterior: PosteriorMoments,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Observed-data negative log-likelihood at `theta`.
    pub nll: Nll,
    pub tau: f64,
    pub lambda_max: f64,
}

impl FitResult {
    pub fn a_hat(&self) -> &DMatrix<f64> {
        &self.posterior.a_hat
    }
}

/// `lambda_t = lambda_max * min(1, t / anneal_iters)`.
pub fn anneal_schedule(t: usize, cfg: &FitConfig, lambda_max: f64) -> f64 {
    if cfg.anneal_iters == 0 {
        return lambda_max;
    }
    lambda_max * (t as f64 / cfg.anneal_iters as f64).min(1.0)
}

/// Top-`l` eigenvectors of `sum_j Y_j Y_j^T` (the mode-2 unfolding of the
/// stacked data), padded with seeded random orthonormal directions when the
/// data have lower rank.
pub fn hosvd_init(data: &ConnectivityDataset, l: usize, seed: u64) -> Result<DMatrix<f64>> {
    let v = data.v();
    if l >= v {
        return Err(SlaccError::RankBound { l, v });
    }
    let parts: Vec<DMatrix<f64>> = data.matrices().par_iter().map(|y| y * y).collect();
    let mut m = DMatrix::zeros(v, v);
    for part in &parts {
        m += part;
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let cutoff = top * 1e-12;
    let mut u = DMatrix::zeros(v, l);
    let mut filled = 0;
    for &k in order.iter().take(l) {
        if eig.eigenvalues[k] <= cutoff || top == 0.0 {
            break;
        }
        u.set_column(filled, &eig.eigenvectors.column(k));
        filled += 1;
    }
    if filled < l {
        log::warn!(
            "initialization: data rank {filled} is below L = {l}; padding with random directions"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while filled < l {
            let mut cand = DVector::from_fn(v, |_, _| StandardNormal.sample(&mut rng));
            for k in 0..filled {
                let col = u.column(k).clone_owned();
                cand -= &col * col.dot(&cand);
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                u.set_column(filled, &(cand / norm));
                filled += 1;
            }
        }
    }
    for k in 0..l {
        let mut best = 0;
        for r in 1..v {
            if u[(r, k)].abs() > u[(best, k)].abs() {
                best = r;
            }
        }
        if u[(best, k)] < 0.0 {
            u.column_mut(k).neg_mut();
        }
    }
    Ok(u)
}

/// Least-squares scores for fixed loadings, then `B`, `sigma^2`, `phi^2` from them.
fn initial_parameters(
    data: &ConnectivityDataset,
    u: &DMatrix<f64>,
    floor: f64,
) -> Result<ParameterSet> {
    let l = u.ncols();
    let gram = loading_gram(u, data.mode());
    let proj = project_all(u, data);
    let mut ridge = gram.clone();
    for k in 0..l {
        ridge[(k, k)] += 1e-10 * (1.0 + gram[(k, k)]);
    }
    let chol = nalgebra::Cholesky::new(ridge)
        .ok_or_else(|| SlaccError::Numerical("initial loadings are degenerate".into()))?;
    let a0 = chol.solve(&proj.transpose()).transpose();
    let ones = DMatrix::from_element(data.n_sites(), l, 1.0);
    let b = update_beta(&a0, data.covariates(), &ones, data.sites())?;
    let zero_q = vec![DMatrix::zeros(l, l); data.n_sites()];
    let sigma2 = update_sigma2(&a0, &zero_q, &b, data.covariates(), data.sites(), floor);
    let phi2 = update_phi2(data, &gram, &proj, &a0, &zero_q, floor);
    ParameterSet::new(u.clone(), b, sigma2, phi2)
}

/// Removes the listed factor columns from parameters and posterior moments.
fn keep_columns(
    theta: &ParameterSet,
    post: &PosteriorMoments,
    keep: &[usize],
) -> (ParameterSet, PosteriorMoments) {
    let pick = |m: &DMatrix<f64>| {
        DMatrix::from_fn(m.nrows(), keep.len(), |r, c| m[(r, keep[c])])
    };
    let theta2 = ParameterSet {
        u: pick(&theta.u),
        b: pick(&theta.b),
        sigma2: pick(&theta.sigma2),
        phi2: theta.phi2.clone(),
    };
    let q = post
        .q
        .iter()
        .map(|q| DMatrix::from_fn(keep.len(), keep.len(), |a, b| q[(keep[a], keep[b])]))
        .collect();
    (
        theta2,
        PosteriorMoments {
            a_hat: pick(&post.a_hat),
            q,
        },
    )
}

/// Rescales column `k` of the loadings by `1/c` and compensates scores,
/// coefficients and variances so that every model term is unchanged.
fn rescale_column(theta: &mut ParameterSet, post: &mut PosteriorMoments, k: usize, c: f64) {
    let c2 = c * c;
    theta.u.column_mut(k).scale_mut(1.0 / c);
    theta.b.column_mut(k).scale_mut(c2);
    theta.sigma2.column_mut(k).scale_mut(c2 * c2);
    post.a_hat.column_mut(k).scale_mut(c2);
    for q in post.q.iter_mut() {
        q.column_mut(k).scale_mut(c2);
        q.row_mut(k).scale_mut(c2);
    }
}

/// Canonical representative: unit-norm columns, first clear nonzero entry
/// positive, factors ordered by the first site's variance (descending), then
/// by support size, then by position. Zero columns are dropped.
pub fn canonicalize(
    theta: &ParameterSet,
    post: &PosteriorMoments,
) -> (ParameterSet, PosteriorMoments) {
    let l = theta.l();
    let live: Vec<usize> = (0..l)
        .filter(|&k| theta.u.column(k).iter().any(|&x| x != 0.0))
        .collect();
    if live.len() < l {
        log::warn!("dropping {} zero loading column(s)", l - live.len());
    }
    let (mut th, mut po) = keep_columns(theta, post, &live);
    for k in 0..th.l() {
        let c = th.u.column(k).norm();
        if (c - 1.0).abs() > 1e-12 {
            rescale_column(&mut th, &mut po, k, c);
        }
        if let Some(first) = th.u.column(k).iter().find(|x| x.abs() > 1e-9) {
            if *first < 0.0 {
                th.u.column_mut(k).neg_mut();
            }
        }
    }
    let nnz: Vec<usize> = (0..th.l())
        .map(|k| th.u.column(k).iter().filter(|&&x| x != 0.0).count())
        .collect();
    let mut order: Vec<usize> = (0..th.l()).collect();
    if th.n_sites() > 0 {
        order.sort_by(|&a, &b| {
            th.sigma2[(0, b)]
                .partial_cmp(&th.sigma2[(0, a)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(nnz[a].cmp(&nnz[b]))
                .then(a.cmp(&b))
        });
    }
    keep_columns(&th, &po, &order)
}

/// State carried between EM iterations: parameters plus `S^T S` and
/// `S^T y_j` for the current loadings.
struct EmState {
    theta: ParameterSet,
    gram: DMatrix<f64>,
    proj: DMatrix<f64>,
}

impl EmState {
    fn new(theta: ParameterSet, data: &ConnectivityDataset) -> Self {
        let gram = loading_gram(&theta.u, data.mode());
        let proj = project_all(&theta.u, data);
        Self { theta, gram, proj }
    }
}

struct StepOutcome {
    delta_u: f64,
    admm_status: Option<AdmmStatus>,
    admm_iterations: usize,
}

/// One EM iteration in the order E-step, loadings, `B` and `sigma^2`, `phi^2`.
fn em_iteration(
    state: &mut EmState,
    data: &ConnectivityDataset,
    cfg: &FitConfig,
    lambda: f64,
    tau: f64,
    update_u: bool,
) -> Result<StepOutcome> {
    let mut post = estep_with(&state.theta, data, &state.gram, &state.proj)?;
    let mut theta = state.theta.clone();
    let mut out = StepOutcome {
        delta_u: 0.0,
        admm_status: None,
        admm_iterations: 0,
    };
    if update_u && theta.l() > 0 {
        let stats = UStepStats::new(data, &post, &theta.phi2, cfg.u_objective);
        let c = if lambda > 0.0 {
            tlp_weights(&theta.u, tau)
        } else {
            DMatrix::zeros(theta.v(), theta.l())
        };
        let admm = admm_with_stats(&theta.u, &stats, lambda, c.clone(), c, &cfg.admm);
        if admm.status == AdmmStatus::Diverged {
            log::warn!("loading update diverged; keeping previous loadings");
        }
        out.admm_status = Some(admm.status);
        out.admm_iterations = admm.iterations;
        let u_prev = theta.u.clone();
        theta.u = admm.u;
        let live: Vec<usize> = (0..theta.l())
            .filter(|&k| theta.u.column(k).norm() >= cfg.dead_column_tol)
            .collect();
        if live.len() < theta.l() {
            log::info!(
                "{} factor(s) removed by the penalty",
                theta.l() - live.len()
            );
            let (th, po) = keep_columns(&theta, &post, &live);
            theta = th;
            post = po;
        }
        for k in 0..theta.l() {
            let c = theta.u.column(k).norm();
            rescale_column(&mut theta, &mut post, k, c);
        }
        out.delta_u = if live.len() == u_prev.ncols() {
            (&theta.u - &u_prev).norm()
        } else {
            f64::INFINITY
        };
        state.gram = loading_gram(&theta.u, data.mode());
        state.proj = project_all(&theta.u, data);
    }
    let x = data.covariates();
    theta.b = update_beta(&post.a_hat, x, &theta.sigma2, data.sites())?;
    theta.sigma2 = update_sigma2(
        &post.a_hat,
        &post.q,
        &theta.b,
        x,
        data.sites(),
        cfg.variance_floor,
    );
    theta.phi2 = update_phi2(
        data,
        &state.gram,
        &state.proj,
        &post.a_hat,
        &post.q,
        cfg.variance_floor,
    );
    state.theta = theta;
    Ok(out)
}

fn record(
    state: &EmState,
    data: &ConnectivityDataset,
    iteration: usize,
    phase: Phase,
    lambda: f64,
    step: &StepOutcome,
) -> Result<IterationRecord> {
    let nll = nll_with(&state.theta, data, &state.gram, &state.proj).map_err(|e| {
        SlaccError::Numerical(format!("iteration {iteration} ({phase:?}): {e}"))
    })?;
    let rec = IterationRecord {
        iteration,
        phase,
        lambda,
        nll: nll.scaled,
        nll_total: nll.total,
        delta_u: step.delta_u,
        admm_status: step.admm_status.map(|s| s.to_string()),
        admm_iterations: step.admm_iterations,
        nnz_u: state.theta.nnz_u(),
        l: state.theta.l(),
    };
    log::debug!(
        "{{\"iteration\":{},\"phase\":\"{:?}\",\"lambda\":{},\"nll\":{},\"delta_u\":{},\"nnz\":{}}}",
        rec.iteration,
        rec.phase,
        rec.lambda,
        rec.nll,
        rec.delta_u,
        rec.nnz_u
    );
    Ok(rec)
}

fn check_input(data: &ConnectivityDataset, l: usize, cfg: &FitConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = data.empty_site() {
        return Err(SlaccError::InvalidInput(format!("site {i} has no subjects")));
    }
    let report = data.validate(Some(l));
    for v in &report.violations {
        match v {
            Violation::RankNotBelowV { l, v } if !cfg.force => {
                return Err(SlaccError::RankBound { l: *l, v: *v });
            }
            Violation::RankNotBelowV { .. } | Violation::DimensionsTooSmall { .. } => {
                log::warn!("{v}");
            }
            other => return Err(SlaccError::InvalidInput(other.to_string())),
        }
    }
    Ok(())
}

fn finish(
    state: EmState,
    data: &ConnectivityDataset,
    trace: Vec<IterationRecord>,
    converged: bool,
    tau: f64,
    lambda_max: f64,
) -> Result<FitResult> {
    let post = estep_with(&state.theta, data, &state.gram, &state.proj)?;
    let (theta, posterior) = canonicalize(&state.theta, &post);
    let nll = crate::likelihood::nll(&theta, data)?;
    Ok(FitResult {
        theta,
        posterior,
        iterations: trace.len(),
        trace,
        converged,
        nll,
        tau,
        lambda_max,
    })
}

/// Model with no factors: `phi_i^2` is the mean squared entry of site `i`.
fn fit_empty(data: &ConnectivityDataset, cfg: &FitConfig) -> Result<FitResult> {
    let m = data.n_sites();
    let empty = DMatrix::zeros(data.n(), 0);
    let phi2 = update_phi2(
        data,
        &DMatrix::zeros(0, 0),
        &empty,
        &empty,
        &vec![DMatrix::zeros(0, 0); m],
        cfg.variance_floor,
    );
    let theta = ParameterSet::new(
        DMatrix::zeros(data.v(), 0),
        DMatrix::zeros(data.q(), 0),
        DMatrix::zeros(m, 0),
        phi2,
    )?;
    let state = EmState::new(theta, data);
    finish(state, data, Vec::new(), true, f64::NAN, 0.0)
}

/// Fits the model with `l` factors.
pub fn fit(data: &ConnectivityDataset, l: usize, cfg: &FitConfig) -> Result<FitResult> {
    check_input(data, l, cfg)?;
    if l == 0 {
        return fit_empty(data, cfg);
    }
    if data.matrices().iter().all(|y| y.iter().all(|&x| x == 0.0)) {
        log::warn!("every matrix is zero; returning the model without factors");
        return fit_empty(data, cfg);
    }
    let (n, v) = (data.n(), data.v());
    let tau = cfg.tau_for(v, l, n);
    let lambda_max = cfg.lambda_for(n);
    let u0 = if l < v {
        hosvd_init(data, l, cfg.seed)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g = DMatrix::from_fn(v, l, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let q = qr.q();
        DMatrix::from_fn(v, l, |r, c| if c < q.ncols() { q[(r, c)] } else { 0.0 })
    };
    let theta0 = initial_parameters(data, &u0, cfg.variance_floor)?;
    let mut state = EmState::new(theta0, data);
    let mut trace = Vec::new();
    let mut iteration = 0;

    for _ in 0..cfg.warmup_iters {
        iteration += 1;
        let step = em_iteration(&mut state, data, cfg, 0.0, tau, true)?;
        trace.push(record(&state, data, iteration, Phase::Warmup, 0.0, &step)?);
        if step.delta_u < cfg.em_tol {
            break;
        }
    }
    log::info!(
        "warm-up finished after {iteration} iteration(s), nnz(U) = {}",
        state.theta.nnz_u()
    );

    let mut converged = false;
    for t in 1..=cfg.max_em_iter {
        if state.theta.l() == 0 {
            converged = true;
            break;
        }
        iteration += 1;
        let lambda = anneal_schedule(t, cfg, lambda_max);
        let step = em_iteration(&mut state, data, cfg, lambda, tau, true)?;
        trace.push(record(&state, data, iteration, Phase::Penalized, lambda, &step)?);
        if t >= cfg.anneal_iters && step.delta_u < cfg.em_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped at max_em_iter = {} without converging", cfg.max_em_iter);
    }
    finish(state, data, trace, converged, tau, lambda_max)
}

/// Fit with the loadings held at `u`: only the E-step and the `B`,
/// `sigma^2`, `phi^2` updates iterate. Convergence is declared when the
/// largest change in `B`, `sigma^2` or `phi^2` falls below `em_tol`.
pub fn fit_fixed_loadings(
    data: &ConnectivityDataset,
    u: &DMatrix<f64>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    check_input(data, u.ncols(), cfg)?;
    if u.nrows() != data.v() {
        return Err(SlaccError::Dimension(format!(
            "loadings have {} rows, data have V = {}",
            u.nrows(),
            data.v()
        )));
    }
    let theta0 = initial_parameters(data, u, cfg.variance_floor)?;
    let mut state = EmState::new(theta0, data);
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 1..=cfg.max_em_iter {
        let prev = state.theta.clone();
        let step = em_iteration(&mut state, data, cfg, 0.0, 1.0, false)?;
        trace.push(record(&state, data, it, Phase::Fixed, 0.0, &step)?);
        let change = (&state.theta.b - &prev.b)
            .amax()
            .max((&state.theta.sigma2 - &prev.sigma2).amax())
            .max((&state.theta.phi2 - &prev.phi2).amax());
        if change < cfg.em_tol {
            converged = true;
            break;
        }
    }
    finish(state, data, trace, converged, f64::NAN, 0.0)
}
