//! Time-varying Kalman recursion and the steady-state (DARE) gain.

use serde::Serialize;

use crate::matquad::{spectral_radius, symmetrize};
use crate::objective::GainPolicy;
use crate::sysmodel::{is_observable, PublicModel, SystemModel, Trajectory};
use crate::{Error, Matrix, Result, Vector};

pub const DEFAULT_DARE_TOL: f64 = 1e-13;
pub const DEFAULT_DARE_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Serialize)]
pub struct KalmanSolution {
    pub p_inf: Matrix,
    pub l_inf: Matrix,
    pub iterations: usize,
    /// Last step size `‖P(k+1) − P(k)‖_F`.
    pub residual: f64,
    /// Spectral radius of `A − L∞ H`.
    pub rho: f64,
}

/// Predictor gain `A P Hᵀ (H P Hᵀ + R)⁻¹` for covariance `p`.
fn predictor_gain(a: &Matrix, h: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let innovation = symmetrize(&(h * p * h.transpose() + r));
    let chol = innovation.cholesky().ok_or_else(|| {
        Error::Numerical("innovation covariance H P Hᵀ + R is not positive definite".into())
    })?;
    // L = A P Hᵀ S⁻¹  ⇔  Lᵀ = S⁻¹ H P Aᵀ
    Ok(chol.solve(&(h * p * a.transpose())).transpose())
}

/// One Riccati step: returns `(L(t), P(t+1))` with
/// `L = A P Hᵀ (H P Hᵀ + R)⁻¹` and `P⁺ = (A − L H) P Aᵀ + Q`.
pub fn kalman_step(p: &Matrix, model: &SystemModel) -> Result<(Matrix, Matrix)> {
    model.check_dimensions()?;
    if p.shape() != model.a.shape() {
        return Err(Error::Input(format!(
            "covariance is {}x{}, expected {}x{}",
            p.nrows(),
            p.ncols(),
            model.n(),
            model.n()
        )));
    }
    let l = predictor_gain(&model.a, &model.h, &model.r, p)?;
    let a_l = &model.a - &l * &model.h;
    let p_next = symmetrize(&(a_l * p * model.a.transpose() + &model.q));
    Ok((l, p_next))
}

/// Iterates [`kalman_step`] from `P = Q` until
/// `‖P⁺ − P‖_F ≤ tol·(1 + ‖P‖_F)`.
pub fn dare_gain(model: &SystemModel, tol: f64, max_iter: usize) -> Result<KalmanSolution> {
    model.check_for_objective()?;
    if !is_observable(&model.a, &model.h).observable {
        return Err(Error::Input("(A, H) is not observable".into()));
    }
    let mut p = model.q.clone();
    let mut residual = f64::INFINITY;
    for k in 1..=max_iter {
        let (_, p_next) = kalman_step(&p, model)?;
        residual = (&p_next - &p).norm();
        let converged = residual <= tol * (1.0 + p.norm());
        p = p_next;
        if converged {
            let l_inf = predictor_gain(&model.a, &model.h, &model.r, &p)?;
            let rho = spectral_radius(&(&model.a - &l_inf * &model.h))?;
            if rho >= 1.0 {
                return Err(Error::Numerical(format!(
                    "Riccati fixed point is not stabilizing (rho = {rho})"
                )));
            }
            return Ok(KalmanSolution {
                p_inf: p,
                l_inf,
                iterations: k,
                residual,
                rho,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// `x̂(T)`.
    pub estimate: Vector,
    /// `ŷ(T) = H x̂(T)`.
    pub prediction: Vector,
    /// `e_T = y(T) − ŷ(T)`.
    pub error: Vector,
}

/// Runs the constant-gain predictor `x̂(t+1) = A x̂(t) + L (y(t) − H x̂(t))`
/// from `x̂(0) = m0` over `y(0), …, y(T−1)` and scores it against `y(T)`.
pub fn filter_rollout(public: &PublicModel, gain: &GainPolicy, traj: &Trajectory) -> Result<FilterOutput> {
    let n = public.n();
    let m = public.m();
    if gain.l.shape() != (n, m) || traj.measurements.nrows() != m {
        return Err(Error::Input(format!(
            "gain is {}x{} and measurements have {} rows; expected {n}x{m} and {m}",
            gain.l.nrows(),
            gain.l.ncols(),
            traj.measurements.nrows()
        )));
    }
    if traj.window_length == 0 || traj.measurements.ncols() != traj.window_length + 1 {
        return Err(Error::Input("trajectory must hold window_length + 1 samples".into()));
    }
    let mut x = public.m0.clone();
    let mut next = Vector::zeros(n);
    for t in 0..traj.window_length {
        next.gemv(1.0, &gain.a_l, &x, 0.0);
        next.gemv(1.0, &gain.l, &traj.y(t), 1.0);
        std::mem::swap(&mut x, &mut next);
    }
    let prediction = &public.h * &x;
    let error = traj.target() - &prediction;
    Ok(FilterOutput {
        estimate: x,
        prediction,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{mass_spring_model, simulate_trajectory};
    use approx::assert_relative_eq;

    fn s1() -> SystemModel {
        SystemModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.0)
    }

    fn scalar_p_inf() -> f64 {
        (0.81 + 4.6561f64.sqrt()) / 2.0
    }

    #[test]
    fn scalar_step_by_hand() {
        let (l, p) = kalman_step(&Matrix::from_element(1, 1, 1.0), &s1()).unwrap();
        assert_relative_eq!(l[(0, 0)], 0.45, max_relative = 1e-15);
        assert_relative_eq!(p[(0, 0)], 1.405, max_relative = 1e-15);
    }

    #[test]
    fn zero_dynamics_step() {
        let mut model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
        model.a = Matrix::zeros(2, 2);
        let (l, p) = kalman_step(&Matrix::identity(2, 2), &model).unwrap();
        assert_eq!(l, Matrix::zeros(2, 1));
        assert_eq!(p, model.q);
    }

    #[test]
    fn huge_measurement_noise_kills_gain() {
        let mut model = s1();
        model.r = Matrix::from_element(1, 1, 1e8);
        let (l, _) = kalman_step(&Matrix::from_element(1, 1, 1.0), &model).unwrap();
        assert!(l[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let mut model = s1();
        model.r = Matrix::zeros(1, 1);
        let err = kalman_step(&Matrix::zeros(1, 1), &model).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn scalar_dare_root() {
        let sol = dare_gain(&s1(), DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER).unwrap();
        let p = scalar_p_inf();
        assert_relative_eq!(sol.p_inf[(0, 0)], p, max_relative = 1e-12);
        assert_relative_eq!(sol.l_inf[(0, 0)], 0.9 * p / (p + 1.0), max_relative = 1e-12);
        assert_relative_eq!(sol.l_inf[(0, 0)], 0.53766, epsilon = 1e-5);
        assert!(sol.rho < 1.0);
    }

    #[test]
    fn dare_fixed_point_and_stability() {
        let model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
        let sol = dare_gain(&model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER).unwrap();
        let (_, p_next) = kalman_step(&sol.p_inf, &model).unwrap();
        assert!((p_next - &sol.p_inf).norm() <= 1e-12);
        assert!(sol.rho < 1.0);
    }

    #[test]
    fn zero_dynamics_dare() {
        let mut model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
        model.a = Matrix::zeros(2, 2);
        model.h = Matrix::identity(2, 2);
        model.r = Matrix::identity(2, 2);
        let sol = dare_gain(&model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER).unwrap();
        assert!((sol.p_inf - &model.q).norm() < 1e-15);
        assert_eq!(sol.l_inf, Matrix::zeros(2, 2));
    }

    #[test]
    fn dare_reports_nonconvergence_and_unobservable() {
        let model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
        assert!(matches!(dare_gain(&model, 1e-13, 3), Err(Error::Convergence { .. })));
        let mut bad = model.clone();
        bad.a = Matrix::identity(2, 2);
        assert!(matches!(dare_gain(&bad, 1e-13, 100), Err(Error::Input(_))));
    }

    #[test]
    fn rollout_with_zero_gain_predicts_zero() {
        let model = s1();
        let traj = simulate_trajectory(&model, 0, 6, 5).unwrap();
        let gain = GainPolicy::new(&model.a, &model.h, Matrix::zeros(1, 1)).unwrap();
        let out = filter_rollout(&model.public(), &gain, &traj).unwrap();
        assert_eq!(out.prediction[0], 0.0);
        assert_eq!(out.error, traj.target().into_owned());
    }

    #[test]
    fn one_step_by_hand() {
        let model = s1();
        let traj = Trajectory::from_measurements(Matrix::from_row_slice(1, 2, &[2.0, 3.0])).unwrap();
        let gain = GainPolicy::new(&model.a, &model.h, Matrix::from_element(1, 1, 0.9)).unwrap();
        let out = filter_rollout(&model.public(), &gain, &traj).unwrap();
        assert_relative_eq!(out.estimate[0], 1.8, max_relative = 1e-15);
        assert_relative_eq!(out.error[0], 3.0 - 1.8, max_relative = 1e-15);
    }

    #[test]
    fn noiseless_error_contracts_at_closed_loop_rate() {
        let mut model = mass_spring_model(0.1, 1.0, 0.0, 0.0, 0.0).unwrap();
        model.m0 = Vector::from_vec(vec![1.0, 0.3]);
        let public = PublicModel {
            m0: Vector::zeros(2),
            ..model.public()
        };
        let gain = GainPolicy::new(&model.a, &model.h, Matrix::from_row_slice(2, 1, &[0.7, 0.46])).unwrap();
        for w in [5, 20, 80, 320] {
            let traj = simulate_trajectory(&model, 0, w, 0).unwrap();
            let e = filter_rollout(&public, &gain, &traj).unwrap().error.norm();
            let bound = gain.a_l.pow(w as u32).norm() * model.m0.norm();
            assert!(e <= bound * (1.0 + 1e-12) + 1e-15, "w={w} e={e}");
        }
        let traj = simulate_trajectory(&model, 0, 320, 0).unwrap();
        assert!(filter_rollout(&public, &gain, &traj).unwrap().error.norm() < 1e-10);
        // With the exact initial mean the error vanishes identically.
        let traj = simulate_trajectory(&model, 0, 10, 0).unwrap();
        let e = filter_rollout(&model.public(), &gain, &traj).unwrap().error.norm();
        assert!(e < 1e-14);
    }

    #[test]
    fn recursion_matches_closed_form_sum() {
        let model = mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap();
        let mut public = model.public();
        public.m0 = Vector::from_vec(vec![0.4, -1.2]);
        let gain = GainPolicy::new(&model.a, &model.h, Matrix::from_row_slice(2, 1, &[0.5, 0.2])).unwrap();
        for seed in 0..10 {
            let traj = simulate_trajectory(&model, 3, 25, seed).unwrap();
            let out = filter_rollout(&public, &gain, &traj).unwrap();
            let t_len = traj.window_length;
            let mut closed = gain.a_l.pow(t_len as u32) * &public.m0;
            for t in 0..t_len {
                closed += gain.a_l.pow((t_len - t - 1) as u32) * &gain.l * traj.y(t);
            }
            assert!((out.estimate - closed).norm() <= 1e-10);
        }
    }
}
