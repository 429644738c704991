//! Reference computations that avoid the library's structured shortcuts.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use slacc::{ConnectivityDataset, DiagonalMode, ParameterSet, PosteriorMoments};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Upper triangle read row by row.
pub fn tvec(y: &DMatrix<f64>, mode: DiagonalMode) -> DVector<f64> {
    let v = y.nrows();
    let mut out = Vec::new();
    for r in 0..v {
        let start = if mode == DiagonalMode::Include { r } else { r + 1 };
        for c in start..v {
            out.push(y[(r, c)]);
        }
    }
    DVector::from_vec(out)
}

/// Columns `T(u_l u_l^T)`.
pub fn dense_s(u: &DMatrix<f64>, mode: DiagonalMode) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..u.ncols())
        .map(|l| {
            let c = u.column(l);
            tvec(&(c * c.transpose()), mode)
        })
        .collect();
    let p = cols.first().map_or(mode.p(u.nrows()), |c| c.len());
    DMatrix::from_fn(p, u.ncols(), |r, l| cols[l][r])
}

/// Full covariance of one vectorized observation from site `i`.
pub fn dense_sigma(theta: &ParameterSet, i: usize, mode: DiagonalMode) -> DMatrix<f64> {
    let s = dense_s(&theta.u, mode);
    let d = DMatrix::from_diagonal(&theta.sigma2.row(i).transpose());
    let p = s.nrows();
    &s * d * s.transpose() + DMatrix::identity(p, p) * theta.phi2[i]
}

/// `-sum_j log N(y_j; S B^T x_j, Sigma_i)` by explicit inversion.
pub fn dense_nll_total(theta: &ParameterSet, data: &ConnectivityDataset) -> f64 {
    let mode = data.mode();
    let s = dense_s(&theta.u, mode);
    let mut total = 0.0;
    for j in 0..data.n() {
        let i = data.site(j);
        let sigma = dense_sigma(theta, i, mode);
        let p = sigma.nrows() as f64;
        let inv = sigma.clone().try_inverse().expect("invertible");
        let logdet = sigma.determinant().ln();
        let mean = &s * (theta.b.transpose() * data.covariates().row(j).transpose());
        let r = tvec(data.matrix(j), mode) - mean;
        total += 0.5 * (p * (2.0 * std::f64::consts::PI).ln() + logdet + (r.transpose() * inv * &r)[(0, 0)]);
    }
    total
}

/// Conditional law of the scores given `y` from the joint Gaussian.
pub fn dense_posterior(
    theta: &ParameterSet,
    data: &ConnectivityDataset,
    j: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let mode = data.mode();
    let i = data.site(j);
    let s = dense_s(&theta.u, mode);
    let d = DMatrix::from_diagonal(&theta.sigma2.row(i).transpose());
    let sigma = dense_sigma(theta, i, mode);
    let inv = sigma.try_inverse().expect("invertible");
    let m = theta.b.transpose() * data.covariates().row(j).transpose();
    let cross = &d * s.transpose();
    let y = tvec(data.matrix(j), mode);
    let mean = &m + &cross * &inv * (y - &s * &m);
    let cov = &d - &cross * &inv * cross.transpose();
    (mean, cov)
}

/// Random parameters and a dataset drawn from the model.
pub struct Instance {
    pub theta: ParameterSet,
    pub data: ConnectivityDataset,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    v: usize,
    l: usize,
    n_per_site: &[usize],
    q: usize,
    mode: DiagonalMode,
) -> Instance {
    let m = n_per_site.len();
    let u = normal_matrix(rng, v, l) * 0.7;
    let b = normal_matrix(rng, q, l);
    let sigma2 = DMatrix::from_fn(m, l, |_, _| rng.gen_range(0.3..2.0));
    let phi2 = DVector::from_fn(m, |_, _| rng.gen_range(0.3..2.0));
    let theta = ParameterSet::new(u, b, sigma2, phi2).unwrap();
    let data = sample_data(rng, &theta, n_per_site, mode);
    Instance { theta, data }
}

/// Draws covariates (first column 1) and matrices from `theta`.
pub fn sample_data(
    rng: &mut ChaCha8Rng,
    theta: &ParameterSet,
    n_per_site: &[usize],
    mode: DiagonalMode,
) -> ConnectivityDataset {
    let (v, l, q) = (theta.v(), theta.l(), theta.q());
    let mut sites = Vec::new();
    for (i, &ni) in n_per_site.iter().enumerate() {
        sites.extend(std::iter::repeat_n(i, ni));
    }
    let n = sites.len();
    let x = DMatrix::from_fn(n, q, |_, c| {
        if c == 0 {
            1.0
        } else {
            StandardNormal.sample(rng)
        }
    });
    let mut mats = Vec::new();
    for j in 0..n {
        let i = sites[j];
        let mut y = DMatrix::zeros(v, v);
        for r in 0..v {
            for c in r..v {
                let e: f64 = StandardNormal.sample(rng);
                y[(r, c)] = e * theta.phi2[i].sqrt();
                y[(c, r)] = y[(r, c)];
            }
        }
        for k in 0..l {
            let mean: f64 = (0..q).map(|c| x[(j, c)] * theta.b[(c, k)]).sum();
            let z: f64 = StandardNormal.sample(rng);
            let a = mean + z * theta.sigma2[(i, k)].sqrt();
            let col = theta.u.column(k);
            y += col * col.transpose() * a;
        }
        let y = (&y + y.transpose()) * 0.5;
        mats.push(y);
    }
    ConnectivityDataset::new(mats, sites, x, mode).unwrap()
}

/// `g(U) = sum_j w_j / 2 {||Y_j - U Pi_j U^T||_F^2 + tr((U^T U o U^T U) Q_i)}`.
pub fn frobenius_objective(
    u: &DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
) -> f64 {
    let utu = u.transpose() * u;
    let quartic = utu.component_mul(&utu);
    let mut total = 0.0;
    for j in 0..data.n() {
        let i = data.site(j);
        let pi = DMatrix::from_diagonal(&post.a_hat.row(j).transpose());
        let r = data.matrix(j) - u * pi * u.transpose();
        total += 0.5 / phi2[i] * (r.norm_squared() + quartic.component_mul(&post.q[i]).sum());
    }
    total
}

pub fn frobenius_gradient(
    u: &DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
) -> DMatrix<f64> {
    let utu = u.transpose() * u;
    let mut g = DMatrix::zeros(u.nrows(), u.ncols());
    for j in 0..data.n() {
        let i = data.site(j);
        let w = 1.0 / phi2[i];
        let pi = DMatrix::from_diagonal(&post.a_hat.row(j).transpose());
        let r = data.matrix(j) - u * &pi * u.transpose();
        g += (-(&r * u * &pi) * 2.0 + u * post.q[i].component_mul(&utu) * 2.0) * w;
    }
    g
}

/// Gradient descent with backtracking on `g`, run to a tiny gradient.
pub fn gradient_descent(
    start: &DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
) -> DMatrix<f64> {
    let mut u = start.clone();
    let mut step = 1e-2;
    for _ in 0..20_000 {
        let g = frobenius_gradient(&u, data, post, phi2);
        let gn = g.norm_squared();
        if gn.sqrt() < 1e-11 {
            break;
        }
        let f0 = frobenius_objective(&u, data, post, phi2);
        loop {
            let cand = &u - &g * step;
            if frobenius_objective(&cand, data, post, phi2) <= f0 - 0.5 * step * gn {
                u = cand;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return newton_polish(u, data, post, phi2);
            }
        }
    }
    newton_polish(u, data, post, phi2)
}

/// Newton steps with a central-difference Hessian of the analytic gradient.
fn newton_polish(
    mut u: DMatrix<f64>,
    data: &ConnectivityDataset,
    post: &PosteriorMoments,
    phi2: &DVector<f64>,
) -> DMatrix<f64> {
    let d = u.len();
    for _ in 0..50 {
        let g = frobenius_gradient(&u, data, post, phi2);
        if g.norm() < 1e-12 {
            break;
        }
        let h = 1e-5;
        let mut hess = DMatrix::zeros(d, d);
        for k in 0..d {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] += h;
            dn[k] -= h;
            let col = (frobenius_gradient(&up, data, post, phi2) - frobenius_gradient(&dn, data, post, phi2)) / (2.0 * h);
            for r in 0..d {
                hess[(r, k)] = col[r];
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        let gv = DVector::from_column_slice(g.as_slice());
        let Some(dir) = hess.lu().solve(&gv) else { break };
        for k in 0..d {
            u[k] -= dir[k];
        }
    }
    u
}

/// Exhaustive search over column permutations maximizing summed |corr|.
pub fn brute_force_assignment(score: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let n = score.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), f64::NEG_INFINITY);
    fn rec(k: usize, perm: &mut Vec<usize>, score: &DMatrix<f64>, best: &mut (Vec<usize>, f64)) {
        let n = perm.len();
        if k == n {
            let total: f64 = (0..n).map(|r| score[(r, perm[r])]).sum();
            if total > best.1 {
                *best = (perm.clone(), total);
            }
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            rec(k + 1, perm, score, best);
            perm.swap(k, i);
        }
    }
    rec(0, &mut perm, score, &mut best);
    best
}
