//! The linear time-invariant system
//!
//! ```text
//! x(t+1) = A x(t) + ξ(t),   ξ ~ N(0, Q)
//! y(t)   = H x(t) + ω(t),   ω ~ N(0, R)
//! x(0)   ~ N(m0, P0)
//! ```
//!
//! plus observability checks, seeded simulation and the undamped
//! mass-spring benchmark.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::matquad::spectral_radius;
use crate::rng::rng_from_seed;
use crate::{Error, Matrix, Result, Vector};

/// Longest trajectory (burn-in plus stored samples) the simulator produces.
pub const MAX_TRAJECTORY_STEPS: usize = 10_000;

/// Full system description, including the noise statistics that the learner
/// is not supposed to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct SystemModel {
    pub a: Matrix,
    pub h: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub p0: Matrix,
    pub m0: Vector,
}

/// The part of a [`SystemModel`] a blind learner may use: dynamics,
/// observation map and initial mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicModel {
    pub a: Matrix,
    pub h: Matrix,
    pub m0: Vector,
}

impl PublicModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }
}

impl SystemModel {
    pub fn new(a: Matrix, h: Matrix, q: Matrix, r: Matrix, p0: Matrix, m0: Vector) -> Result<Self> {
        let model = SystemModel { a, h, q, r, p0, m0 };
        model.check_dimensions()?;
        Ok(model)
    }

    /// Scalar model `x⁺ = a x + ξ, y = h x + ω`.
    pub fn scalar(a: f64, h: f64, q: f64, r: f64, p0: f64, m0: f64) -> Self {
        let s = |v: f64| Matrix::from_element(1, 1, v);
        SystemModel {
            a: s(a),
            h: s(h),
            q: s(q),
            r: s(r),
            p0: s(p0),
            m0: Vector::from_element(1, m0),
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn public(&self) -> PublicModel {
        PublicModel {
            a: self.a.clone(),
            h: self.h.clone(),
            m0: self.m0.clone(),
        }
    }

    fn dimension_issues(&self) -> Vec<String> {
        let n = self.a.nrows();
        let mut issues = Vec::new();
        if n == 0 || self.a.ncols() != n {
            issues.push(format!("A must be square and non-empty, got {}x{}", n, self.a.ncols()));
        }
        let m = self.h.nrows();
        if m == 0 || self.h.ncols() != n {
            issues.push(format!("H must be m x {n} with m >= 1, got {}x{}", m, self.h.ncols()));
        }
        for (name, mat, k) in [("Q", &self.q, n), ("R", &self.r, m), ("P0", &self.p0, n)] {
            if mat.nrows() != k || mat.ncols() != k {
                issues.push(format!("{name} must be {k}x{k}, got {}x{}", mat.nrows(), mat.ncols()));
            }
        }
        if self.m0.len() != n {
            issues.push(format!("m0 must have length {n}, got {}", self.m0.len()));
        }
        let all_finite = [&self.a, &self.h, &self.q, &self.r, &self.p0]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
            && self.m0.iter().all(|v| v.is_finite());
        if !all_finite {
            issues.push("non-finite entries".into());
        }
        issues
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let issues = self.dimension_issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(issues.join("; ")))
        }
    }

    /// Requirements of the cost and optimizer layers: consistent shapes and
    /// `Q ≻ 0`, `R ≻ 0`.
    pub fn check_for_objective(&self) -> Result<()> {
        self.check_dimensions()?;
        for (name, mat) in [("Q", &self.q), ("R", &self.r)] {
            let status = covariance_status(mat);
            if !status.positive_definite {
                return Err(Error::Input(format!(
                    "{name} must be symmetric positive definite (min eigenvalue {:e})",
                    status.min_eigenvalue
                )));
            }
        }
        Ok(())
    }

    /// Diagnostics for the model; never fails.
    pub fn validate(&self) -> ValidationReport {
        let dimension_issues = self.dimension_issues();
        let dimensions_ok = dimension_issues.is_empty();
        let q = covariance_status(&self.q);
        let r = covariance_status(&self.r);
        let p0 = covariance_status(&self.p0);
        let (observable, observability_rank) = if dimensions_ok {
            let rep = is_observable(&self.a, &self.h);
            (Some(rep.observable), Some(rep.rank))
        } else {
            (None, None)
        };
        let rho_a = if dimensions_ok { spectral_radius(&self.a).ok() } else { None };
        ValidationReport {
            dimensions_ok,
            dimension_issues,
            q,
            r,
            p0,
            observable,
            observability_rank,
            rho_a,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceStatus {
    pub square: bool,
    pub symmetric: bool,
    pub psd: bool,
    pub positive_definite: bool,
    pub min_eigenvalue: f64,
}

fn covariance_status(c: &Matrix) -> CovarianceStatus {
    if c.nrows() == 0 || c.nrows() != c.ncols() || !c.iter().all(|v| v.is_finite()) {
        return CovarianceStatus {
            square: c.nrows() == c.ncols() && c.nrows() > 0,
            symmetric: false,
            psd: false,
            positive_definite: false,
            min_eigenvalue: f64::NAN,
        };
    }
    let scale = c.norm().max(1.0);
    let symmetric = (c - c.transpose()).norm() <= 1e-12 * scale;
    let min_eigenvalue = crate::matquad::symmetrize(c).symmetric_eigen().eigenvalues.min();
    CovarianceStatus {
        square: true,
        symmetric,
        psd: symmetric && min_eigenvalue >= -1e-10 * scale,
        positive_definite: symmetric && min_eigenvalue > 1e-14 * scale,
        min_eigenvalue,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub dimensions_ok: bool,
    pub dimension_issues: Vec<String>,
    pub q: CovarianceStatus,
    pub r: CovarianceStatus,
    pub p0: CovarianceStatus,
    pub observable: Option<bool>,
    pub observability_rank: Option<usize>,
    /// Spectral radius of `A`.
    pub rho_a: Option<f64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.dimensions_ok
            && self.q.psd
            && self.r.psd
            && self.p0.psd
            && self.observable == Some(true)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObservabilityReport {
    pub observable: bool,
    pub rank: usize,
}

/// Rank test on the stacked observability matrix `[H; HA; …; HA^{n−1}]`,
/// with singular values below `1e-10·σ_max` counted as zero.
pub fn is_observable(a: &Matrix, h: &Matrix) -> ObservabilityReport {
    let n = a.nrows();
    let m = h.nrows();
    let mut obs = Matrix::zeros(n * m, n);
    let mut block = h.clone();
    for k in 0..n {
        obs.view_mut((k * m, 0), (m, n)).copy_from(&block);
        block = &block * a;
    }
    let sv = obs.svd(false, false).singular_values;
    let smax = sv.max();
    let rank = if smax > 0.0 {
        sv.iter().filter(|&&s| s > 1e-10 * smax).count()
    } else {
        0
    };
    ObservabilityReport {
        observable: rank == n,
        rank,
    }
}

/// Undamped oscillator `ẍ = −ω² x` discretized exactly with sample time `dt`,
/// position measured: `A = [[cos θ, sin θ/ω], [−ω sin θ, cos θ]]`, `θ = ω dt`,
/// `H = [1 0]`.
pub fn mass_spring_model(dt: f64, omega: f64, q_var: f64, r_var: f64, p0_var: f64) -> Result<SystemModel> {
    if !(dt > 0.0) || !(omega > 0.0) {
        return Err(Error::Parameter(format!(
            "mass-spring needs dt > 0 and omega > 0, got dt={dt}, omega={omega}"
        )));
    }
    let theta = omega * dt;
    let (s, c) = theta.sin_cos();
    let a = Matrix::from_row_slice(2, 2, &[c, s / omega, -omega * s, c]);
    let h = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
    SystemModel::new(
        a,
        h,
        Matrix::identity(2, 2) * q_var,
        Matrix::from_element(1, 1, r_var),
        Matrix::identity(2, 2) * p0_var,
        Vector::zeros(2),
    )
}

/// Smallest `k` with `rate^k ≤ level`, clamped to `[1, cap]`.
pub fn decay_horizon(rate: f64, level: f64, cap: usize) -> usize {
    if rate <= 0.0 {
        return 1;
    }
    if rate >= 1.0 {
        return cap;
    }
    let k = (level.ln() / rate.ln()).ceil();
    (k.max(1.0) as usize).min(cap)
}

/// Burn-in length for a reference closed-loop spectral radius: the filter
/// error forgets its initial condition to `1e-8` within this many steps.
pub fn burn_in_for_rate(rho_ref: f64) -> usize {
    decay_horizon(rho_ref, 1e-8, 1_000)
}

/// One realization `y(0), …, y(T)` (and optionally `x(0), …, x(T)`) after a
/// discarded burn-in. Times are relative to the end of the burn-in.
///
/// `window_length = T` counts the measurements `y(0), …, y(T−1)` a filter
/// consumes; the extra sample `y(T)` is the prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub window_length: usize,
    /// `m × (T+1)`, column `t` is `y(t)`.
    pub measurements: Matrix,
    /// `n × (T+1)`, column `t` is `x(t)`.
    pub states: Option<Matrix>,
    pub seed: u64,
    pub burn_in: usize,
}

impl Trajectory {
    /// Builds a trajectory from measured columns `y(0), …, y(T)`.
    pub fn from_measurements(measurements: Matrix) -> Result<Self> {
        if measurements.ncols() < 2 || measurements.nrows() == 0 {
            return Err(Error::Input(
                "a trajectory needs at least one history sample and a target".into(),
            ));
        }
        Ok(Trajectory {
            window_length: measurements.ncols() - 1,
            measurements,
            states: None,
            seed: 0,
            burn_in: 0,
        })
    }

    pub fn y(&self, t: usize) -> nalgebra::DVectorView<'_, f64> {
        self.measurements.column(t)
    }

    /// The prediction target `y(T)`.
    pub fn target(&self) -> nalgebra::DVectorView<'_, f64> {
        self.measurements.column(self.window_length)
    }

    /// Writes `t,y_1..y_m[,x_1..x_n]` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let m = self.measurements.nrows();
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|i| format!("y_{i}")));
        if let Some(x) = &self.states {
            header.extend((1..=x.nrows()).map(|i| format!("x_{i}")));
        }
        w.write_record(&header)?;
        for t in 0..self.measurements.ncols() {
            let mut row = vec![t.to_string()];
            row.extend(self.measurements.column(t).iter().map(|v| v.to_string()));
            if let Some(x) = &self.states {
                row.extend(x.column(t).iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Symmetric square root-like factor `S` with `S Sᵀ = C` for PSD `C`.
/// Uses an eigendecomposition so singular covariances (e.g. `Q = 0`) work.
pub fn covariance_factor(c: &Matrix, what: &str) -> Result<Matrix> {
    let status = covariance_status(c);
    if !status.psd {
        return Err(Error::Input(format!(
            "{what} must be symmetric positive semidefinite (min eigenvalue {:e})",
            status.min_eigenvalue
        )));
    }
    let eig = crate::matquad::symmetrize(c).symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&sqrt))
}

/// Pre-factored sampler for repeated simulation of one model.
#[derive(Debug, Clone)]
pub struct Simulator {
    a: Matrix,
    h: Matrix,
    m0: Vector,
    q_factor: Matrix,
    r_factor: Matrix,
    p0_factor: Matrix,
}

impl Simulator {
    pub fn new(model: &SystemModel) -> Result<Self> {
        model.check_dimensions()?;
        Ok(Simulator {
            a: model.a.clone(),
            h: model.h.clone(),
            m0: model.m0.clone(),
            q_factor: covariance_factor(&model.q, "Q")?,
            r_factor: covariance_factor(&model.r, "R")?,
            p0_factor: covariance_factor(&model.p0, "P0")?,
        })
    }

    /// Draws `x(0) ~ N(m0, P0)`, runs `burn_in + window_length + 1` steps and
    /// keeps the last `window_length + 1`. Per step the measurement noise is
    /// drawn before the process noise.
    pub fn run(&self, burn_in: usize, window_length: usize, seed: u64, keep_states: bool) -> Result<Trajectory> {
        if window_length == 0 {
            return Err(Error::Parameter("window_length must be >= 1".into()));
        }
        let total = burn_in + window_length + 1;
        if total > MAX_TRAJECTORY_STEPS {
            return Err(Error::Parameter(format!(
                "trajectory of {total} steps exceeds the cap of {MAX_TRAJECTORY_STEPS}"
            )));
        }
        let n = self.a.nrows();
        let m = self.h.nrows();
        let mut rng = rng_from_seed(seed);
        let mut draw = |buf: &mut Vector| {
            for v in buf.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        };

        let mut zn = Vector::zeros(n);
        let mut zm = Vector::zeros(m);
        let mut x = self.m0.clone();
        draw(&mut zn);
        x.gemv(1.0, &self.p0_factor, &zn, 1.0);

        let mut x_next = Vector::zeros(n);
        let mut measurements = Matrix::zeros(m, window_length + 1);
        let mut states = keep_states.then(|| Matrix::zeros(n, window_length + 1));
        for step in 0..total {
            draw(&mut zm);
            if step >= burn_in {
                let col = step - burn_in;
                let mut y = measurements.column_mut(col);
                y.gemv(1.0, &self.h, &x, 0.0);
                y.gemv(1.0, &self.r_factor, &zm, 1.0);
                if let Some(s) = states.as_mut() {
                    s.column_mut(col).copy_from(&x);
                }
            }
            if step + 1 < total {
                draw(&mut zn);
                x_next.gemv(1.0, &self.a, &x, 0.0);
                x_next.gemv(1.0, &self.q_factor, &zn, 1.0);
                std::mem::swap(&mut x, &mut x_next);
            }
        }
        Ok(Trajectory {
            window_length,
            measurements,
            states,
            seed,
            burn_in,
        })
    }
}

/// Simulates one trajectory with states recorded.
pub fn simulate_trajectory(model: &SystemModel, burn_in: usize, window_length: usize, seed: u64) -> Result<Trajectory> {
    Simulator::new(model)?.run(burn_in, window_length, seed, true)
}

/// On-disk model format: row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModelFile {
    A: Vec<Vec<f64>>,
    H: Vec<Vec<f64>>,
    Q: Vec<Vec<f64>>,
    R: Vec<Vec<f64>>,
    P0: Vec<Vec<f64>>,
    m0: Vec<f64>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Input(format!("{name}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(nrows, ncols, &flat))
}

pub(crate) fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<ModelFile> for SystemModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        SystemModel::new(
            matrix_from_rows(&f.A, "A")?,
            matrix_from_rows(&f.H, "H")?,
            matrix_from_rows(&f.Q, "Q")?,
            matrix_from_rows(&f.R, "R")?,
            matrix_from_rows(&f.P0, "P0")?,
            Vector::from_vec(f.m0),
        )
    }
}

impl From<SystemModel> for ModelFile {
    fn from(m: SystemModel) -> Self {
        ModelFile {
            A: matrix_to_rows(&m.a),
            H: matrix_to_rows(&m.h),
            Q: matrix_to_rows(&m.q),
            R: matrix_to_rows(&m.r),
            P0: matrix_to_rows(&m.p0),
            m0: m.m0.iter().copied().collect(),
        }
    }
}
