//! The upper-triangle vectorization operator and the inner-product identities
//! that let the rest of the crate work with `V x V` matrices instead of
//! length-`p` vectors.
//!
//! Ordering is row-major over the upper triangle:
//! `(0,0), (0,1), ..., (0,V-1), (1,1), ..., (V-1,V-1)`. In [`DiagonalMode::Exclude`]
//! the `(v,v)` entries are skipped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaccError};

/// Default tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Whether diagonal entries take part in the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagonalMode {
    Include,
    Exclude,
}

impl DiagonalMode {
    /// Number of vectorized entries for a `v x v` matrix.
    pub fn p(self, v: usize) -> usize {
        match self {
            DiagonalMode::Include => v * (v + 1) / 2,
            DiagonalMode::Exclude => v * v.saturating_sub(1) / 2,
        }
    }

    /// `+1` when the diagonal is counted, `-1` when it is dropped.
    ///
    /// For symmetric `A`, `B`: `<T(A), T(B)> = (<A, B>_F + sign * sum_v A_vv B_vv) / 2`.
    pub(crate) fn sign(self) -> f64 {
        match self {
            DiagonalMode::Include => 1.0,
            DiagonalMode::Exclude => -1.0,
        }
    }

    fn keeps(self, row: usize, col: usize) -> bool {
        col > row || (col == row && self == DiagonalMode::Include)
    }
}

impl std::fmt::Display for DiagonalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DiagonalMode::Include => "include",
            DiagonalMode::Exclude => "exclude",
        })
    }
}

impl std::str::FromStr for DiagonalMode {
    type Err = SlaccError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include" => Ok(DiagonalMode::Include),
            "exclude" => Ok(DiagonalMode::Exclude),
            other => Err(SlaccError::InvalidInput(format!(
                "unknown diagonal mode '{other}' (expected include|exclude)"
            ))),
        }
    }
}

/// Largest `|Y_ij - Y_ji|` over the matrix.
pub fn max_asymmetry(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows().min(y.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((y[(i, j)] - y[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(y: &DMatrix<f64>) -> Result<()> {
    if y.nrows() != y.ncols() {
        return Err(SlaccError::NotSquare {
            rows: y.nrows(),
            cols: y.ncols(),
        });
    }
    let dev = max_asymmetry(y);
    if dev > SYMMETRY_TOL || dev.is_nan() {
        return Err(SlaccError::NotSymmetric { max_deviation: dev });
    }
    Ok(())
}

/// Upper-triangle vectorization of a symmetric matrix.
pub fn vectorize(y: &DMatrix<f64>, mode: DiagonalMode) -> Result<DVector<f64>> {
    check_symmetric(y)?;
    let v = y.nrows();
    let mut out = Vec::with_capacity(mode.p(v));
    for r in 0..v {
        for c in r..v {
            if mode.keeps(r, c) {
                out.push(y[(r, c)]);
            }
        }
    }
    Ok(DVector::from_vec(out))
}

/// Inverse of [`vectorize`]; in exclude mode the diagonal is filled with zeros.
pub fn unvectorize(y: &DVector<f64>, v: usize, mode: DiagonalMode) -> Result<DMatrix<f64>> {
    let expected = mode.p(v);
    if y.len() != expected {
        return Err(SlaccError::LengthMismatch {
            expected,
            actual: y.len(),
        });
    }
    let mut out = DMatrix::zeros(v, v);
    let mut k = 0;
    for r in 0..v {
        for c in r..v {
            if mode.keeps(r, c) {
                out[(r, c)] = y[k];
                out[(c, r)] = y[k];
                k += 1;
            }
        }
    }
    Ok(out)
}

/// `vectorize(u u^T)` without forming the outer product.
pub fn rank1_vector(u: &DVector<f64>, mode: DiagonalMode) -> DVector<f64> {
    let v = u.len();
    let mut out = Vec::with_capacity(mode.p(v));
    for r in 0..v {
        for c in r..v {
            if mode.keeps(r, c) {
                out.push(u[r] * u[c]);
            }
        }
    }
    DVector::from_vec(out)
}

/// Dense `p x L` matrix `S = [T(u_1 u_1^T), ..., T(u_L u_L^T)]`.
///
/// Only needed for reporting and tests; the solver never forms `S`.
pub fn loading_design(u: &DMatrix<f64>, mode: DiagonalMode) -> DMatrix<f64> {
    let p = mode.p(u.nrows());
    let mut s = DMatrix::zeros(p, u.ncols());
    for l in 0..u.ncols() {
        let col = rank1_vector(&u.column(l).into_owned(), mode);
        s.set_column(l, &col);
    }
    s
}

/// `S^T S` computed from `U` in `O(V L^2)`.
pub fn loading_gram(u: &DMatrix<f64>, mode: DiagonalMode) -> DMatrix<f64> {
    let l = u.ncols();
    let utu = u.tr_mul(u);
    let sq = u.map(|x| x * x);
    let diag = sq.tr_mul(&sq);
    let sign = mode.sign();
    DMatrix::from_fn(l, l, |a, b| 0.5 * (utu[(a, b)] * utu[(a, b)] + sign * diag[(a, b)]))
}

/// `S^T y` for one subject, where `y = T(Y)`.
pub fn loading_project(u: &DMatrix<f64>, y: &DMatrix<f64>, mode: DiagonalMode) -> DVector<f64> {
    let yu = y * u;
    let sign = mode.sign();
    DVector::from_fn(u.ncols(), |l, _| {
        let mut quad = 0.0;
        let mut diag = 0.0;
        for v in 0..u.nrows() {
            quad += u[(v, l)] * yu[(v, l)];
            diag += u[(v, l)] * u[(v, l)] * y[(v, v)];
        }
        0.5 * (quad + sign * diag)
    })
}

/// `||T(Y)||^2`.
pub fn vec_norm_sq(y: &DMatrix<f64>, mode: DiagonalMode) -> f64 {
    let fro = y.norm_squared();
    let diag: f64 = y.diagonal().iter().map(|x| x * x).sum();
    0.5 * (fro + mode.sign() * diag)
}

/// `sum_l a_l u_l u_l^T`, the low-rank signal for one subject.
pub fn reconstruct(u: &DMatrix<f64>, scores: &[f64]) -> DMatrix<f64> {
    let v = u.nrows();
    let mut scaled = u.clone();
    for (l, &a) in scores.iter().enumerate() {
        scaled.column_mut(l).scale_mut(a);
    }
    let mut out = &scaled * u.transpose();
    // exact symmetry
    for r in 0..v {
        for c in (r + 1)..v {
            let m = 0.5 * (out[(r, c)] + out[(c, r)]);
            out[(r, c)] = m;
            out[(c, r)] = m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    #[test]
    fn vectorize_include_reads_upper_triangle() {
        let y = dmatrix![1.0, 2.0; 2.0, 3.0];
        let v = vectorize(&y, DiagonalMode::Include).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn vectorize_exclude_drops_diagonal() {
        let y = dmatrix![0.0, 5.0; 5.0, 0.0];
        let v = vectorize(&y, DiagonalMode::Exclude).unwrap();
        assert_eq!(v.as_slice(), &[5.0]);
    }

    #[test]
    fn p_matches_both_modes() {
        assert_eq!(DiagonalMode::Include.p(50), 1275);
        assert_eq!(DiagonalMode::Exclude.p(50), 1225);
        for v in 1..20 {
            assert_eq!(DiagonalMode::Include.p(v), v * (v + 1) / 2);
            assert_eq!(DiagonalMode::Exclude.p(v), v * (v - 1) / 2);
        }
        let y = DMatrix::<f64>::identity(50, 50);
        assert_eq!(vectorize(&y, DiagonalMode::Include).unwrap().len(), 1275);
    }

    #[test]
    fn vectorize_rejects_bad_input() {
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            vectorize(&rect, DiagonalMode::Include),
            Err(SlaccError::NotSquare { .. })
        ));
        let asym = dmatrix![1.0, 2.0; 2.5, 1.0];
        assert!(matches!(
            vectorize(&asym, DiagonalMode::Include),
            Err(SlaccError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn unvectorize_examples() {
        let y = unvectorize(&dvector![1.0, 2.0, 3.0], 2, DiagonalMode::Include).unwrap();
        assert_eq!(y, dmatrix![1.0, 2.0; 2.0, 3.0]);
        let y = unvectorize(&dvector![5.0], 2, DiagonalMode::Exclude).unwrap();
        assert_eq!(y, dmatrix![0.0, 5.0; 5.0, 0.0]);
        assert!(matches!(
            unvectorize(&dvector![1.0, 2.0], 2, DiagonalMode::Include),
            Err(SlaccError::LengthMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn rank1_examples() {
        assert_eq!(
            rank1_vector(&dvector![1.0, 0.0], DiagonalMode::Include).as_slice(),
            &[1.0, 0.0, 0.0]
        );
        let h = 1.0 / 2f64.sqrt();
        let s = rank1_vector(&dvector![h, h], DiagonalMode::Include);
        for x in s.iter() {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    fn sym_from(v: usize, vals: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(v, v);
        let mut k = 0;
        for r in 0..v {
            for c in r..v {
                m[(r, c)] = vals[k];
                m[(c, r)] = vals[k];
                k += 1;
            }
        }
        m
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(v in 1usize..9, seed in proptest::collection::vec(-1e3f64..1e3, 45)) {
            let y = sym_from(v, &seed);
            let back = unvectorize(&vectorize(&y, DiagonalMode::Include).unwrap(), v, DiagonalMode::Include).unwrap();
            prop_assert_eq!(back, y);
            let vec = DVector::from_vec(seed[..DiagonalMode::Exclude.p(v)].to_vec());
            let m = unvectorize(&vec, v, DiagonalMode::Exclude).unwrap();
            prop_assert_eq!(vectorize(&m, DiagonalMode::Exclude).unwrap(), vec);
        }

        #[test]
        fn rank1_equals_outer_product(u in proptest::collection::vec(-3f64..3.0, 1..12)) {
            let u = DVector::from_vec(u);
            for mode in [DiagonalMode::Include, DiagonalMode::Exclude] {
                let outer = &u * u.transpose();
                let direct = vectorize(&outer, mode).unwrap();
                let fast = rank1_vector(&u, mode);
                prop_assert_eq!(direct, fast);
            }
        }

        #[test]
        fn gram_and_projection_match_dense(
            vals in proptest::collection::vec(-2f64..2.0, 6 * 3 + 21),
        ) {
            let u = DMatrix::from_column_slice(6, 3, &vals[..18]);
            let y = sym_from(6, &vals[18..]);
            for mode in [DiagonalMode::Include, DiagonalMode::Exclude] {
                let s = loading_design(&u, mode);
                let yv = vectorize(&y, mode).unwrap();
                let g = loading_gram(&u, mode);
                let dense_g = s.tr_mul(&s);
                prop_assert!((g - dense_g).abs().max() < 1e-12);
                let p = loading_project(&u, &y, mode);
                prop_assert!((p - s.tr_mul(&yv)).abs().max() < 1e-12);
                prop_assert!((vec_norm_sq(&y, mode) - yv.norm_squared()).abs() < 1e-10);
            }
        }
    }
}
