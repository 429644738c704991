mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use slacc::estep::estep;
use slacc::ustep::{
    admm_solve, admm_with_stats, assemble_u_system, soft_threshold, tlp_weights,
    unpenalized_objective, AdmmStatus, UStepStats,
};
use slacc::{AdmmConfig, DiagonalMode, UObjective};

fn tight() -> AdmmConfig {
    AdmmConfig {
        primal_tol: Some(1e-11),
        dual_tol: Some(1e-11),
        max_iter: 200_000,
        ..AdmmConfig::default()
    }
}

#[test]
fn unpenalized_admm_matches_gradient_descent() {
    let mut r = rng(4);
    let inst = random_instance(&mut r, 5, 2, &[5, 5], 2, DiagonalMode::Include);
    let post = estep(&inst.theta, &inst.data).unwrap();
    let start = &inst.theta.u + normal_matrix(&mut r, 5, 2) * 0.05;
    let stats = UStepStats::new(&inst.data, &post, &inst.theta.phi2, UObjective::Frobenius);
    let zeros = DMatrix::zeros(5, 2);
    let out = admm_with_stats(&start, &stats, 0.0, zeros.clone(), zeros, &tight());
    assert_eq!(out.status, AdmmStatus::Converged);
    assert!(out.consensus_residual < 1e-6, "{}", out.consensus_residual);
    let gd = gradient_descent(&start, &inst.data, &post, &inst.theta.phi2);
    let grad = frobenius_gradient(&gd, &inst.data, &post, &inst.theta.phi2);
    assert!(grad.norm() < 1e-8, "oracle gradient {}", grad.norm());
    assert!((&out.u - &gd).norm() < 1e-4, "{}", (&out.u - &gd).norm());
}

#[test]
fn admm_objective_decreases_overall() {
    let mut r = rng(9);
    let inst = random_instance(&mut r, 6, 2, &[8, 8], 2, DiagonalMode::Include);
    let post = estep(&inst.theta, &inst.data).unwrap();
    let out = admm_solve(
        &inst.theta.u,
        &inst.data,
        &post,
        &inst.theta.phi2,
        1.0,
        0.2,
        &AdmmConfig::default(),
        UObjective::Vectorized,
    );
    assert_ne!(out.status, AdmmStatus::Diverged);
    let first = out.objective_trace[0];
    let last = *out.objective_trace.last().unwrap();
    assert!(last <= first + 1e-9);
}

#[test]
fn overwhelming_penalty_zeroes_everything() {
    let mut r = rng(10);
    let inst = random_instance(&mut r, 5, 2, &[5, 5], 2, DiagonalMode::Include);
    let post = estep(&inst.theta, &inst.data).unwrap();
    let small = inst.theta.u.map(|x| x * 1e-3);
    let out = admm_solve(
        &small,
        &inst.data,
        &post,
        &inst.theta.phi2,
        1e9,
        1.0,
        &AdmmConfig::default(),
        UObjective::Vectorized,
    );
    assert!(out.u.iter().all(|&x| x == 0.0));
}

#[test]
fn vectorized_loss_is_expected_vectorized_residual() {
    let mut r = rng(12);
    for mode in [DiagonalMode::Include, DiagonalMode::Exclude] {
        let inst = random_instance(&mut r, 5, 3, &[4, 5], 2, mode);
        let post = estep(&inst.theta, &inst.data).unwrap();
        let u = normal_matrix(&mut r, 5, 3);
        let got = unpenalized_objective(&u, &u, &inst.data, &post, &inst.theta.phi2, UObjective::Vectorized);
        let s = dense_s(&u, mode);
        let sts = s.transpose() * &s;
        let mut expect = 0.0;
        for j in 0..inst.data.n() {
            let i = inst.data.site(j);
            let res = tvec(inst.data.matrix(j), mode) - &s * post.a_hat.row(j).transpose();
            expect += (res.norm_squared() + (&sts * &post.q[i]).trace()) / inst.theta.phi2[i];
        }
        assert!((got - expect).abs() < 1e-9 * expect, "{mode}: {got} vs {expect}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn summary_objective_matches_direct_sum(seed in 0u64..10_000, vectorized in any::<bool>(), exclude in any::<bool>()) {
        let mut r = rng(seed);
        let mode = if exclude { DiagonalMode::Exclude } else { DiagonalMode::Include };
        let obj = if vectorized { UObjective::Vectorized } else { UObjective::Frobenius };
        let inst = random_instance(&mut r, 5, 2, &[3, 4], 2, mode);
        let post = estep(&inst.theta, &inst.data).unwrap();
        let u = normal_matrix(&mut r, 5, 2);
        let us = normal_matrix(&mut r, 5, 2);
        let stats = UStepStats::new(&inst.data, &post, &inst.theta.phi2, obj);
        let a = stats.smooth_objective(&u, &us);
        let b = unpenalized_objective(&u, &us, &inst.data, &post, &inst.theta.phi2, obj);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        // symmetric in its two arguments
        let c = stats.smooth_objective(&us, &u);
        prop_assert!((a - c).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..10_000, vectorized in any::<bool>()) {
        let mut r = rng(seed);
        let obj = if vectorized { UObjective::Vectorized } else { UObjective::Frobenius };
        let inst = random_instance(&mut r, 4, 2, &[3, 3], 2, DiagonalMode::Include);
        let post = estep(&inst.theta, &inst.data).unwrap();
        let u = normal_matrix(&mut r, 4, 2);
        let us = normal_matrix(&mut r, 4, 2);
        let stats = UStepStats::new(&inst.data, &post, &inst.theta.phi2, obj);
        let g = stats.gradient(&u, &us);
        let h = 1e-6;
        for idx in 0..8 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[idx] += h;
            dn[idx] -= h;
            let fd = (unpenalized_objective(&up, &us, &inst.data, &post, &inst.theta.phi2, obj)
                - unpenalized_objective(&dn, &us, &inst.data, &post, &inst.theta.phi2, obj)) / (2.0 * h);
            prop_assert!((fd - g[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{} vs {}", fd, g[idx]);
        }
    }

    #[test]
    fn linear_system_solution_is_stationary(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let inst = random_instance(&mut r, 5, 2, &[4, 4], 2, DiagonalMode::Include);
        let post = estep(&inst.theta, &inst.data).unwrap();
        let stats = UStepStats::new(&inst.data, &post, &inst.theta.phi2, UObjective::Frobenius);
        let us = normal_matrix(&mut r, 5, 2);
        let z = normal_matrix(&mut r, 5, 2);
        let w = normal_matrix(&mut r, 5, 2) * 0.1;
        let lam = normal_matrix(&mut r, 5, 2) * 0.1;
        let (rho, eta) = (3.0, 2.0);
        let (k, rhs) = assemble_u_system(&us, &stats, rho, eta, &z, &w, &lam);
        let u = (k.clone().try_inverse().unwrap() * rhs.transpose()).transpose();
        let grad = stats.gradient(&u, &us) + (&u - &z + &w) * rho + (&u - &us + &lam) * eta;
        prop_assert!(grad.amax() < 1e-8 * (1.0 + k.amax()));
    }

    #[test]
    fn soft_threshold_properties(x in -10.0f64..10.0, k in 0.0f64..5.0) {
        let s = soft_threshold(x, k);
        prop_assert!(s.abs() <= x.abs());
        prop_assert!(s == 0.0 || s.signum() == x.signum());
        prop_assert!((s == 0.0) == (x.abs() <= k));
        prop_assert_eq!(soft_threshold(x, 0.0), x);
    }

    #[test]
    fn tlp_weights_vanish_above_tau(vals in proptest::collection::vec(-1.0f64..1.0, 6), tau in 0.001f64..0.5) {
        let u = DMatrix::from_vec(3, 2, vals);
        let c = tlp_weights(&u, tau);
        for (w, x) in c.iter().zip(u.iter()) {
            if x.abs() > tau {
                prop_assert_eq!(*w, 0.0);
            } else {
                prop_assert_eq!(*w, 1.0 / tau);
            }
        }
    }
}
