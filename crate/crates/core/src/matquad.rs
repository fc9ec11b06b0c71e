//! Dense small-matrix kernels: spectral radius, the Schur-stability
//! predicate and a Smith-doubling solver for the discrete Lyapunov equation
//! `X = F X Fᵀ + W`.

use nalgebra::linalg::Schur;
use serde::Serialize;

use crate::{Error, Matrix, Result};

/// Default mixed absolute/relative residual tolerance for [`solve_dlyap`].
pub const DEFAULT_LYAP_TOL: f64 = 1e-12;

const MAX_DOUBLINGS: usize = 200;
const SCHUR_MAX_ITER: usize = 10_000;

/// Solution of `X = F X Fᵀ + W` together with its certificate.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovSolution {
    pub x: Matrix,
    /// `‖X − F X Fᵀ − W‖_F` of the returned (symmetrized) `X`.
    pub residual_norm: f64,
    pub iterations: usize,
}

pub(crate) fn check_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::Input(format!(
            "{what} must be square with order >= 1, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_finite(m, what)
}

pub(crate) fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} has non-finite entries")))
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    check_square(m, "matrix")?;
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// `true` iff `spectral_radius(m) < 1 − margin`.
pub fn is_schur(m: &Matrix, margin: f64) -> Result<bool> {
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::Parameter(format!(
            "stability margin must lie in [0, 1), got {margin}"
        )));
    }
    Ok(spectral_radius(m)? < 1.0 - margin)
}

/// Symmetric part `(X + Xᵀ)/2`.
pub fn symmetrize(x: &Matrix) -> Matrix {
    (x + x.transpose()) * 0.5
}

/// Residual `‖X − F X Fᵀ − W‖_F`.
pub fn lyapunov_residual(f: &Matrix, w: &Matrix, x: &Matrix) -> f64 {
    (x - f * x * f.transpose() - w).norm()
}

/// Solves the discrete Lyapunov equation `X = F X Fᵀ + W` for Schur-stable `F`
/// by Smith doubling:
///
/// ```text
/// X₀ = W,  F₀ = F
/// X_{k+1} = X_k + F_k X_k F_kᵀ,   F_{k+1} = F_k²
/// ```
///
/// After `k` doublings `X_k` holds the first `2^k` terms of `Σ F^t W (Fᵀ)^t`.
/// The iteration stops once `‖F_k‖_F < 1e-16` or the residual falls below
/// `tol · max(1, ‖X‖_F)`.
pub fn solve_dlyap(f: &Matrix, w: &Matrix, tol: f64) -> Result<LyapunovSolution> {
    check_square(f, "F")?;
    check_square(w, "W")?;
    if f.nrows() != w.nrows() {
        return Err(Error::Input(format!(
            "F is {}x{} but W is {}x{}",
            f.nrows(),
            f.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    let rho = spectral_radius(f)?;
    if rho >= 1.0 {
        return Err(Error::Instability { rho });
    }

    let w = symmetrize(w);
    let mut x = w.clone();
    let mut fk = f.clone();
    let mut iterations = 0;
    loop {
        let residual = lyapunov_residual(f, &w, &x);
        let fk_norm = fk.norm();
        let settled = fk_norm * fk_norm <= f64::EPSILON;
        if (residual <= tol * x.norm().max(1.0) && settled) || fk_norm < 1e-16 {
            return Ok(LyapunovSolution {
                x,
                residual_norm: residual,
                iterations,
            });
        }
        if iterations == MAX_DOUBLINGS || !fk.iter().all(|v| v.is_finite()) {
            return Err(Error::Convergence {
                iterations,
                residual,
            });
        }
        x = symmetrize(&(&x + &fk * &x * fk.transpose()));
        fk = &fk * &fk;
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rotation(theta: f64) -> Matrix {
        Matrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    #[test]
    fn spectral_radius_small_cases() {
        assert_eq!(spectral_radius(&Matrix::from_element(1, 1, 0.9)).unwrap(), 0.9);
        assert_relative_eq!(
            spectral_radius(&Matrix::identity(2, 2)).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(spectral_radius(&rotation(0.1)).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn spectral_radius_rejects_bad_input() {
        assert!(matches!(
            spectral_radius(&Matrix::zeros(2, 3)),
            Err(Error::Input(_))
        ));
        let mut m = Matrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(spectral_radius(&m), Err(Error::Input(_))));
    }

    #[test]
    fn schur_predicate() {
        assert!(is_schur(&Matrix::from_element(1, 1, 0.9), 0.0).unwrap());
        assert!(!is_schur(&Matrix::identity(2, 2), 0.0).unwrap());
        assert!(!is_schur(&rotation(0.1), 0.0).unwrap());
        assert!(!is_schur(&Matrix::from_element(1, 1, 0.9), 0.2).unwrap());
        assert!(matches!(
            is_schur(&Matrix::identity(2, 2), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dlyap_zero_dynamics_returns_forcing() {
        let q = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = solve_dlyap(&Matrix::zeros(2, 2), &q, DEFAULT_LYAP_TOL).unwrap();
        assert_eq!(sol.x, q);
    }

    #[test]
    fn dlyap_scalar_geometric_series() {
        let sol = solve_dlyap(
            &Matrix::from_element(1, 1, 0.5),
            &Matrix::from_element(1, 1, 1.0),
            DEFAULT_LYAP_TOL,
        )
        .unwrap();
        assert_relative_eq!(sol.x[(0, 0)], 4.0 / 3.0, max_relative = 1e-14);

        let sol = solve_dlyap(
            &Matrix::from_element(1, 1, 0.9),
            &Matrix::from_element(1, 1, 1.81),
            DEFAULT_LYAP_TOL,
        )
        .unwrap();
        assert_relative_eq!(sol.x[(0, 0)], 1.81 / 0.19, max_relative = 1e-13);
    }

    #[test]
    fn dlyap_rejects_unstable() {
        let err = solve_dlyap(&Matrix::identity(2, 2), &Matrix::identity(2, 2), 1e-12).unwrap_err();
        assert!(matches!(err, Error::Instability { .. }));
    }

    #[test]
    fn dlyap_near_boundary_meets_residual_contract() {
        // Nonnormal, rho = 0.999.
        let f = Matrix::from_row_slice(2, 2, &[0.999, 0.3, 0.0, 0.95]);
        let w = Matrix::identity(2, 2);
        let sol = solve_dlyap(&f, &w, DEFAULT_LYAP_TOL).unwrap();
        assert!(sol.residual_norm <= DEFAULT_LYAP_TOL * sol.x.norm().max(1.0));
        assert_eq!(sol.x, sol.x.transpose());
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f64..1.0, n * n)
            .prop_map(move |v| Matrix::from_row_slice(n, n, &v))
    }

    fn truncated_series(f: &Matrix, w: &Matrix, terms: usize) -> Matrix {
        let mut acc = Matrix::zeros(f.nrows(), f.ncols());
        let mut term = w.clone();
        for _ in 0..terms {
            acc += &term;
            term = f * term * f.transpose();
        }
        acc
    }

    proptest! {
        #[test]
        fn dlyap_matches_series_and_is_psd(
            (raw, g, target) in (1usize..=4).prop_flat_map(|n| (arb_matrix(n), arb_matrix(n), 0.5f64..0.95))
        ) {
            let rho = spectral_radius(&raw).unwrap();
            prop_assume!(rho > 1e-3);
            let f = &raw * (target / rho);
            let w = &g * g.transpose();
            let sol = solve_dlyap(&f, &w, DEFAULT_LYAP_TOL).unwrap();
            prop_assert!(sol.residual_norm <= DEFAULT_LYAP_TOL * sol.x.norm().max(1.0));
            let min_eig = sol.x.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= -1e-10);
            let series = truncated_series(&f, &w, 200);
            // Non-normal F can leave a visible tail at 200 terms; compare on
            // the subset where the tail is negligible.
            let tail = f.pow(200).norm();
            prop_assume!(tail < 1e-12);
            prop_assert!((&sol.x - series).norm() <= 1e-8 * sol.x.norm().max(1.0));
        }

        #[test]
        fn spectral_radius_transpose_and_similarity_invariant(
            (m, s) in (1usize..=5).prop_flat_map(|n| (arb_matrix(n), arb_matrix(n)))
        ) {
            let rho = spectral_radius(&m).unwrap();
            let rho_t = spectral_radius(&m.transpose()).unwrap();
            prop_assert!((rho - rho_t).abs() <= 1e-12 * rho.max(1.0));

            let n = m.nrows();
            let s = Matrix::identity(n, n) * 2.0 + s * 0.5;
            let svd = s.clone().svd(false, false);
            let cond = svd.singular_values.max() / svd.singular_values.min();
            prop_assume!(cond < 10.0);
            let s_inv = s.clone().try_inverse().unwrap();
            let rho_sim = spectral_radius(&(&s * &m * s_inv)).unwrap();
            prop_assert!((rho - rho_sim).abs() <= 1e-8 * rho.max(1.0));
        }
    }
}
