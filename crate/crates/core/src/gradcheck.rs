//! Central finite differences as the ground truth for analytic gradients,
//! plus random system and gain generators for randomized checks.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::kalman::{dare_gain, DEFAULT_DARE_MAX_ITER, DEFAULT_DARE_TOL};
use crate::objective::{cost, exact_gradient, GainPolicy};
use crate::rng::Rng;
use crate::sysmodel::{is_observable, SystemModel};
use crate::{Error, Matrix, Result, Vector};

/// Relative step used per entry: `h = FD_REL_STEP · (1 + |L_ij|)`.
pub const FD_REL_STEP: f64 = 1e-4;

/// Fourth-order central-difference gradient of `f` at `l`:
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` per entry.
pub fn central_difference<F>(l: &Matrix, mut f: F) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(l.nrows(), l.ncols());
    let mut probe = l.clone();
    for i in 0..l.nrows() {
        for j in 0..l.ncols() {
            let h = FD_REL_STEP * (1.0 + l[(i, j)].abs());
            let mut at = |d: f64| {
                probe[(i, j)] = l[(i, j)] + d;
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            probe[(i, j)] = l[(i, j)];
            grad[(i, j)] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientComparison {
    pub analytic: Vec<Vec<f64>>,
    pub finite_difference: Vec<Vec<f64>>,
    pub max_rel_err: f64,
}

/// Entrywise relative error `|g − d| / max(|g|, |d|, floor)`.
///
/// `floor` keeps entries that are zero up to rounding from dominating; callers
/// pass a value tied to the finite-difference noise level.
pub fn max_relative_error(analytic: &Matrix, fd: &Matrix, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(g, d)| (g - d).abs() / g.abs().max(d.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Noise floor for relative comparisons of a cost of size `j`: entries
/// smaller than this are compared in absolute terms.
pub fn comparison_floor(j: f64) -> f64 {
    1e-6 * j.abs().max(1.0)
}

/// Compares [`exact_gradient`] with central differences of `J`.
pub fn check_exact_gradient(model: &SystemModel, gain: &GainPolicy) -> Result<GradientComparison> {
    let eval = exact_gradient(model, gain)?;
    let analytic = eval.grad.expect("gradient requested");
    let fd = central_difference(&gain.l, |l| {
        cost(model, &GainPolicy::for_model(model, l.clone())?).map(|e| e.j)
    })?;
    let max_rel_err = max_relative_error(&analytic, &fd, comparison_floor(eval.j));
    Ok(GradientComparison {
        analytic: crate::sysmodel::matrix_to_rows(&analytic),
        finite_difference: crate::sysmodel::matrix_to_rows(&fd),
        max_rel_err,
    })
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_spd(rng: &mut Rng, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, n);
    &g * g.transpose() / n as f64 + Matrix::identity(n, n) * 0.1
}

/// Random observable system of size `n × m` with `Q, R ≻ 0` and
/// `ρ(A) ∈ [0.5, 1.2]`.
pub fn random_observable_system(rng: &mut Rng, n: usize, m: usize) -> SystemModel {
    loop {
        let raw = gaussian_matrix(rng, n, n);
        let rho = crate::matquad::spectral_radius(&raw).unwrap_or(0.0);
        if rho < 1e-3 {
            continue;
        }
        let target = rng.random_range(0.5..1.2);
        let a = raw * (target / rho);
        let h = gaussian_matrix(rng, m, n);
        if !is_observable(&a, &h).observable {
            continue;
        }
        let q = random_spd(rng, n);
        let r = random_spd(rng, m);
        let p0 = random_spd(rng, n);
        return SystemModel::new(a, h, q, r, p0, Vector::zeros(n)).expect("consistent shapes");
    }
}

/// Random stabilizing gain around the Kalman gain: `L∞ + σ N(0, I)` with
/// `ρ(A_L) ≤ max_rho`.
pub fn random_stabilizing_gain(model: &SystemModel, rng: &mut Rng, sigma: f64, max_rho: f64) -> Result<GainPolicy> {
    let center = dare_gain(model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)?.l_inf;
    for _ in 0..10_000 {
        let cand = GainPolicy::for_model(model, &center + gaussian_matrix(rng, model.n(), model.m()) * sigma)?;
        if cand.rho <= max_rho {
            return Ok(cand);
        }
    }
    Err(Error::Numerical("could not draw a stabilizing gain".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn central_difference_on_quadratic() {
        let l = Matrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let fd = central_difference(&l, |x| Ok(x[(0, 0)].powi(2) + 3.0 * x[(1, 0)])).unwrap();
        assert!((fd[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((fd[(1, 0)] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn central_difference_is_fourth_order() {
        // Exact on quartics up to rounding.
        let l = Matrix::from_element(1, 1, 0.7);
        let fd = central_difference(&l, |x| Ok(x[(0, 0)].powi(4))).unwrap();
        assert!((fd[(0, 0)] - 4.0 * 0.343).abs() < 1e-9);
    }

    #[test]
    fn random_fixtures_meet_their_contracts() {
        let mut rng = rng_from_seed(3);
        for _ in 0..10 {
            let model = random_observable_system(&mut rng, 3, 2);
            assert!(model.check_for_objective().is_ok());
            let g = random_stabilizing_gain(&model, &mut rng, 0.1, 0.97).unwrap();
            assert!(g.rho <= 0.97);
        }
    }
}
