//! Dense linear-algebra kernels shared across the crate.
//!
//! Everything here is a pure function over [`Matrix`] values backed by
//! `nalgebra`. Rank decisions all go through [`rank_threshold`] so that the
//! data-window rank condition and the pseudo-inverse agree on what "full
//! rank" means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative cutoff used by every numerical rank test.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Absolute/relative tolerance pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Tolerance {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Result<Self> {
        if !(abs_tol >= 0.0 && rel_tol >= 0.0) || (abs_tol == 0.0 && rel_tol == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance needs nonnegative components, not both zero (abs {abs_tol}, rel {rel_tol})"
            )));
        }
        Ok(Self { abs_tol, rel_tol })
    }

    /// Admissible error for a quantity of magnitude `scale`.
    pub fn bound(&self, scale: f64) -> f64 {
        self.abs_tol + self.rel_tol * scale.abs()
    }

    pub fn accepts(&self, error: f64, scale: f64) -> bool {
        error <= self.bound(scale)
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            rel_tol: 1e-9,
        }
    }
}

/// Threshold below which a singular value counts as zero.
pub fn rank_threshold(sigma_max: f64) -> f64 {
    RANK_REL_TOL * sigma_max.max(1.0)
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} has non-finite entries")))
    }
}

/// Builds a matrix from row-major nested rows.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim("ragged matrix rows"));
    }
    let m = Matrix::from_fn(nrows, ncols, |r, c| rows[r][c]);
    ensure_finite(&m, "matrix literal")?;
    Ok(m)
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vector> {
    if m.is_empty() {
        return Err(Error::dim("singular values of an empty matrix"));
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(Vector::from_vec(sv))
}

pub fn min_singular_value(m: &Matrix) -> Result<f64> {
    let sv = singular_values(m)?;
    Ok(sv[sv.len() - 1].max(0.0))
}

/// Spectral (operator 2-) norm. Zero for empty matrices.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m).map(|s| s[0]).unwrap_or(0.0)
}

/// Numerical rank under [`rank_threshold`].
pub fn numerical_rank(m: &Matrix) -> usize {
    match singular_values(m) {
        Ok(sv) => {
            let tol = rank_threshold(sv[0]);
            sv.iter().filter(|&&s| s > tol).count()
        }
        Err(_) => 0,
    }
}

pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let eig = m.clone().complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Unique symmetric `P` with `A' P A - P + beta I = 0`.
///
/// Solved through the vectorized (Kronecker) form, which is fine for the
/// small state dimensions this crate targets.
pub fn solve_discrete_lyapunov(a_cl: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let rho = spectral_radius(a_cl)?;
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let n = a_cl.nrows();
    let at = a_cl.transpose();
    // vec(A' P A) = (A' kron A') vec(P) for column-major vec.
    let lhs = Matrix::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = Vector::from_iterator(
        n * n,
        (0..n * n).map(|i| if i % n == i / n { beta } else { 0.0 }),
    );
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("singular Lyapunov operator".into()))?;
    let p = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok(symmetric_part(&p))
}

/// Left pseudo-inverse `(M'M)^{-1} M'` of a full-column-rank matrix, via SVD.
pub fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::dim("pseudo-inverse of an empty matrix"));
    }
    if m.nrows() < m.ncols() {
        // A wide matrix never has full column rank.
        return Err(Error::RankDeficient {
            sigma_min: 0.0,
            threshold: rank_threshold(spectral_norm(m)),
        });
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let tol = rank_threshold(smax);
    if smin <= tol {
        return Err(Error::RankDeficient {
            sigma_min: smin,
            threshold: tol,
        });
    }
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V'");
    let sinv = Matrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / s));
    Ok(vt.transpose() * sinv * u.transpose())
}

/// Orthonormal basis of the null space of `m` (columns), using the shared
/// rank threshold.
pub fn null_space(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Matrix::zeros(0, 0);
    }
    if rows == 0 {
        return Matrix::identity(cols, cols);
    }
    // Pad to at least square so the SVD returns a full V.
    let padded = if rows < cols {
        let mut p = Matrix::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V'");
    let smax = svd.singular_values.max();
    let tol = rank_threshold(smax);
    let null_idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let mut basis = Matrix::zeros(cols, null_idx.len());
    for (j, &i) in null_idx.iter().enumerate() {
        basis.set_column(j, &vt.row(i).transpose());
    }
    basis
}

pub fn symmetric_part(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetric_part(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    (m - m.transpose()).amax()
}

/// Controllability matrix `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Matrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let m = random_matrix(rng, n, n);
        let rho = spectral_radius(&m).unwrap();
        let target = rng.random_range(0.05..0.95);
        m * (target / rho.max(1e-6))
    }

    #[test]
    fn min_singular_value_cases() {
        assert!((min_singular_value(&Matrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-14);
        let d = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, 2.0]));
        assert!((min_singular_value(&d).unwrap() - 2.0).abs() < 1e-14);
        let noisy = from_rows(&[
            vec![-1.5, -0.75, -0.375, -0.25, -0.1875],
            vec![1.0, 0.5, 0.25, 1.0 / 6.0, 0.125],
        ])
        .unwrap();
        assert!(min_singular_value(&noisy).unwrap() < 1e-12);
        assert!(matches!(
            min_singular_value(&Matrix::zeros(0, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spectral_radius_cases() {
        let nil = from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(spectral_radius(&nil).unwrap() < 1e-12);
        let rot = from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        assert!((spectral_radius(&rot).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_radius(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn spectral_radius_flight_mode_one_matches_quadratic_formula() {
        let a = from_rows(&[vec![0.977, 0.097], vec![0.002, 0.981]]).unwrap();
        // Oracle: roots of lambda^2 - tr lambda + det.
        let tr = a[(0, 0)] + a[(1, 1)];
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let disc = tr * tr - 4.0 * det;
        let expected = if disc >= 0.0 {
            ((tr + disc.sqrt()) / 2.0).abs().max(((tr - disc.sqrt()) / 2.0).abs())
        } else {
            det.sqrt()
        };
        assert!((spectral_radius(&a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_zero_dynamics_gives_identity() {
        let p = solve_discrete_lyapunov(&Matrix::zeros(3, 3), 1.0).unwrap();
        assert!((p - Matrix::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn lyapunov_scalar_matches_series() {
        let series: f64 = (0..200).map(|k| 0.25f64.powi(k)).sum();
        let p = solve_discrete_lyapunov(&Matrix::from_element(1, 1, 0.5), 1.0).unwrap();
        assert!((p[(0, 0)] - series).abs() < 1e-12);
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_stable(&mut rng, 3);
            let beta = rng.random_range(0.1..3.0);
            // Oracle: P = sum_k (A')^k beta A^k.
            let mut term = Matrix::identity(3, 3) * beta;
            let mut series = Matrix::zeros(3, 3);
            for _ in 0..4000 {
                series += &term;
                term = a.transpose() * term * &a;
                if term.amax() < 1e-18 {
                    break;
                }
            }
            let p = solve_discrete_lyapunov(&a, beta).unwrap();
            assert!((&p - &series).amax() < 1e-8 * (1.0 + series.amax()));
            let resid = a.transpose() * &p * &a - &p + Matrix::identity(3, 3) * beta;
            assert!(resid.amax() < 1e-8);
        }
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = Matrix::from_element(1, 1, 1.2);
        assert!(matches!(solve_discrete_lyapunov(&a, 1.0), Err(Error::Unstable(_))));
    }

    #[test]
    fn pseudo_inverse_cases() {
        let i = Matrix::identity(3, 3);
        assert!((pseudo_inverse(&i).unwrap() - &i).amax() < 1e-14);
        let d = from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let expected = from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap();
        assert!((pseudo_inverse(&d).unwrap() - expected).amax() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_matrix(&mut rng, 5, 2);
        let normal = (m.transpose() * &m).try_inverse().unwrap() * m.transpose();
        let pinv = pseudo_inverse(&m).unwrap();
        assert!((&pinv - &normal).amax() < 1e-10);
        assert!((pinv * &m - Matrix::identity(2, 2)).amax() < 1e-10);

        let deficient = from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        assert!(matches!(pseudo_inverse(&deficient), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn null_space_is_orthogonal_complement() {
        let m = from_rows(&[vec![1.0, 1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0, 1.0]]).unwrap();
        let n = null_space(&m);
        assert_eq!(n.ncols(), 2);
        assert!((&m * &n).amax() < 1e-12);
        assert!((n.transpose() * &n - Matrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn tolerance_validation() {
        assert!(Tolerance::new(0.0, 0.0).is_err());
        assert!(Tolerance::new(-1.0, 0.1).is_err());
        let t = Tolerance::new(1e-3, 1e-2).unwrap();
        assert!(t.accepts(0.0105, 1.0));
        assert!(!t.accepts(0.02, 1.0));
    }

    #[test]
    fn controllability_of_double_integrator() {
        let a = from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let b = from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(numerical_rank(&controllability_matrix(&a, &b)), 2);
        let b_bad = from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(numerical_rank(&controllability_matrix(&a, &b_bad)), 1);
    }

    proptest! {
        #[test]
        fn appending_a_column_never_lowers_sigma_min(seed in any::<u64>(), rows in 1usize..5, extra in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = rows + extra;
            let y = random_matrix(&mut rng, rows, cols);
            let b = random_matrix(&mut rng, rows, 1);
            let z = Matrix::from_fn(rows, cols + 1, |r, c| if c < cols { y[(r, c)] } else { b[(r, 0)] });
            let sy = min_singular_value(&y).unwrap();
            let sz = min_singular_value(&z).unwrap();
            prop_assert!(sz >= sy - 1e-12);
        }

        #[test]
        fn lyapunov_solution_is_symmetric_positive_definite(seed in any::<u64>(), n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stable(&mut rng, n);
            let p = solve_discrete_lyapunov(&a, 1.0).unwrap();
            prop_assert!(asymmetry(&p) <= 1e-12 * (1.0 + p.amax()));
            prop_assert!(min_eigenvalue(&p) > 0.0);
        }

        #[test]
        fn spectral_radius_is_absolutely_homogeneous(seed in any::<u64>(), n in 1usize..5, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n, n);
            let lhs = spectral_radius(&(&m * c)).unwrap();
            let rhs = c.abs() * spectral_radius(&m).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
        }
    }
}
