//! Steady-state prediction-error landscape `J(L)` over stabilizing gains.
//!
//! For `L` with `ρ(A − LH) < 1`
//!
//! ```text
//! X = A_L X A_Lᵀ + Q + L R Lᵀ        J(L) = tr(X HᵀH) + tr(R)
//! Y = A_Lᵀ Y A_L + HᵀH               ∇J(L) = 2 Y (L R − A_L X Hᵀ)
//! ```
//!
//! and `J = +∞` elsewhere. The gradient sign is the one certified by central
//! finite differences (see [`crate::gradcheck`]).
//!
//! The module also exposes the constant-gain duality machinery: the
//! finite-horizon cost matrix `X_T(L)`, the adjoint rollout and a Monte
//! Carlo check of the estimation/LQR identity.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::kalman::filter_rollout;
use crate::matquad::{solve_dlyap, spectral_radius, DEFAULT_LYAP_TOL};
use crate::par::{pairwise_sum, Exec};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sysmodel::{Simulator, SystemModel};
use crate::{Error, Matrix, Result, Vector};

/// A candidate gain with its closed-loop matrix and stability status.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPolicy {
    pub l: Matrix,
    /// `A − L H`.
    pub a_l: Matrix,
    pub rho: f64,
    pub stabilizing: bool,
}

impl GainPolicy {
    pub fn new(a: &Matrix, h: &Matrix, l: Matrix) -> Result<Self> {
        if l.nrows() != a.nrows() || l.ncols() != h.nrows() || h.ncols() != a.nrows() {
            return Err(Error::Input(format!(
                "gain must be {}x{}, got {}x{}",
                a.nrows(),
                h.nrows(),
                l.nrows(),
                l.ncols()
            )));
        }
        let a_l = a - &l * h;
        let rho = spectral_radius(&a_l)?;
        Ok(GainPolicy {
            l,
            a_l,
            rho,
            stabilizing: rho < 1.0,
        })
    }

    pub fn for_model(model: &SystemModel, l: Matrix) -> Result<Self> {
        Self::new(&model.a, &model.h, l)
    }

    fn require_stabilizing(&self) -> Result<()> {
        if self.stabilizing {
            Ok(())
        } else {
            Err(Error::Instability { rho: self.rho })
        }
    }
}

/// Cost value with an explicit infinite sentinel outside the stabilizing set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Cost {
    Finite(f64),
    Infinite,
}

impl Cost {
    pub fn value(self) -> f64 {
        match self {
            Cost::Finite(v) => v,
            Cost::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Cost::Finite(_))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostEvaluation {
    pub j: f64,
    pub x: Matrix,
    pub y: Option<Matrix>,
    pub grad: Option<Matrix>,
}

/// `J(L)` and its certificate `X(L)`.
pub fn cost(model: &SystemModel, gain: &GainPolicy) -> Result<CostEvaluation> {
    gain.require_stabilizing()?;
    let w = &model.q + &gain.l * &model.r * gain.l.transpose();
    let x = solve_dlyap(&gain.a_l, &w, DEFAULT_LYAP_TOL)?.x;
    let j = (&x * model.h.transpose() * &model.h).trace() + model.r.trace();
    Ok(CostEvaluation {
        j,
        x,
        y: None,
        grad: None,
    })
}

/// `J(L)` with the infinite sentinel in place of an instability error.
pub fn cost_value(model: &SystemModel, gain: &GainPolicy) -> Result<Cost> {
    match cost(model, gain) {
        Ok(eval) => Ok(Cost::Finite(eval.j)),
        Err(Error::Instability { .. }) => Ok(Cost::Infinite),
        Err(e) => Err(e),
    }
}

/// Full evaluation: `J`, `X`, `Y` and `∇J = 2 Y (L R − A_L X Hᵀ)`.
pub fn exact_gradient(model: &SystemModel, gain: &GainPolicy) -> Result<CostEvaluation> {
    let mut eval = cost(model, gain)?;
    let hth = model.h.transpose() * &model.h;
    let y = solve_dlyap(&gain.a_l.transpose(), &hth, DEFAULT_LYAP_TOL)?.x;
    let inner = &gain.l * &model.r - &gain.a_l * &eval.x * model.h.transpose();
    eval.grad = Some(&y * inner * 2.0);
    eval.y = Some(y);
    Ok(eval)
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteHorizonCost {
    pub x_t: Matrix,
    /// `tr(X_T HᵀH) + tr(R)`.
    pub j_est: f64,
}

/// `X_T(L) = A_L^T P0 (A_Lᵀ)^T + Σ_{t=1..T} A_L^{T−t} (Q + L R Lᵀ) (A_Lᵀ)^{T−t}`,
/// accumulated by the recursion `X_{k+1} = A_L X_k A_Lᵀ + Q + L R Lᵀ`, `X_0 = P0`.
/// Stability is not required.
pub fn finite_horizon_cost_matrix(model: &SystemModel, gain: &GainPolicy, horizon: usize) -> Result<FiniteHorizonCost> {
    if horizon < 1 {
        return Err(Error::Parameter("horizon must be >= 1".into()));
    }
    model.check_dimensions()?;
    let w = &model.q + &gain.l * &model.r * gain.l.transpose();
    let mut x = model.p0.clone();
    for _ in 0..horizon {
        x = &gain.a_l * x * gain.a_l.transpose() + &w;
    }
    let x = crate::matquad::symmetrize(&x);
    let j_est = (&x * model.h.transpose() * &model.h).trace() + model.r.trace();
    Ok(FiniteHorizonCost { x_t: x, j_est })
}

/// Adjoint-system trajectory under the feedback `u(t) = Lᵀ z(t)`.
#[derive(Debug, Clone, Serialize)]
pub struct AdjointRollout {
    pub a: Vector,
    /// `z[t]` holds `z(t)` for `t = 0..=T`.
    pub z: Vec<Vector>,
    /// `u[t − 1]` holds `u(t)` for `t = 1..=T`.
    pub u: Vec<Vector>,
    /// `b = z(0)`.
    pub b: Vector,
    /// LQR cost `z(0)ᵀ P0 z(0) + Σ_{t=1..T} z(t)ᵀ Q z(t) + u(t)ᵀ R u(t)`;
    /// the `(z(0) − b)ᵀ m0` term vanishes for `b = z(0)`.
    pub lqr_cost: f64,
}

/// Runs `z(t) = Aᵀ z(t+1) − Hᵀ u(t+1)` backward from `z(T) = a` with
/// `u(t) = Lᵀ z(t)`.
pub fn adjoint_rollout(model: &SystemModel, gain: &GainPolicy, a: &Vector, horizon: usize) -> Result<AdjointRollout> {
    if horizon < 1 {
        return Err(Error::Parameter("horizon must be >= 1".into()));
    }
    model.check_dimensions()?;
    if a.len() != model.n() {
        return Err(Error::Input(format!("a must have length {}", model.n())));
    }
    let lt = gain.l.transpose();
    let mut z = vec![Vector::zeros(model.n()); horizon + 1];
    let mut u = vec![Vector::zeros(model.m()); horizon];
    z[horizon] = a.clone();
    for t in (0..horizon).rev() {
        u[t] = &lt * &z[t + 1];
        z[t] = model.a.transpose() * &z[t + 1] - model.h.transpose() * &u[t];
    }
    let b = z[0].clone();
    let mut lqr_cost = b.dot(&(&model.p0 * &b));
    for t in 1..=horizon {
        lqr_cost += z[t].dot(&(&model.q * &z[t])) + u[t - 1].dot(&(&model.r * &u[t - 1]));
    }
    Ok(AdjointRollout {
        a: a.clone(),
        z,
        u,
        b,
        lqr_cost,
    })
}

/// Monte Carlo verdict for one side of the duality identity.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloCheck {
    pub mc_mean: f64,
    pub std_err: f64,
    pub closed_form: f64,
    /// `|mean − closed form| / std_err`.
    pub z_score: f64,
    pub pass: bool,
}

impl MonteCarloCheck {
    fn new(samples: &[f64], closed_form: f64) -> Self {
        let n = samples.len() as f64;
        let mean = pairwise_sum(samples, &0.0) / n;
        let dev: Vec<f64> = samples.iter().map(|s| (s - mean).powi(2)).collect();
        let var = if samples.len() > 1 {
            pairwise_sum(&dev, &0.0) / (n - 1.0)
        } else {
            0.0
        };
        let std_err = (var / n).sqrt();
        let diff = (mean - closed_form).abs();
        let slack = 1e-12 * closed_form.abs().max(1.0);
        MonteCarloCheck {
            mc_mean: mean,
            std_err,
            closed_form,
            z_score: if std_err > 0.0 { diff / std_err } else { 0.0 },
            pass: diff <= 3.0 * std_err + slack,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub horizon: usize,
    pub num_samples: usize,
    /// Largest relative violation of `bᵀm0 + Σ u(t+1)ᵀ y(t) = aᵀ x̂_L(T)`.
    pub pairing_max_rel_err: f64,
    pub pairing_pass: bool,
    /// `E|aᵀx(T) − aᵀx̂_L(T)|²` against `aᵀ X_T(L) a`.
    pub state_error: MonteCarloCheck,
    /// `E‖y(T) − ŷ_L(T)‖²` against `tr(X_T HᵀH) + tr(R)`.
    pub prediction_error: MonteCarloCheck,
}

impl DualityReport {
    pub fn pass(&self) -> bool {
        self.pairing_pass && self.state_error.pass && self.prediction_error.pass
    }
}

/// Tolerance of the per-sample adjoint pairing.
pub const PAIRING_REL_TOL: f64 = 1e-9;

/// Checks the estimation/control duality on `num_samples` trajectories
/// started at `x(0) ~ N(m0, P0)` (no burn-in).
pub fn duality_check(
    model: &SystemModel,
    gain: &GainPolicy,
    a: &Vector,
    horizon: usize,
    num_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<DualityReport> {
    if num_samples == 0 {
        return Err(Error::Parameter("num_samples must be >= 1".into()));
    }
    let adj = adjoint_rollout(model, gain, a, horizon)?;
    let fh = finite_horizon_cost_matrix(model, gain, horizon)?;
    let sim = Simulator::new(model)?;
    let public = model.public();

    let per_sample = exec.try_map(num_samples, |i| -> Result<(f64, f64, f64)> {
        let traj = sim.run(0, horizon, derive_seed(seed, &[i as u64]), true)?;
        let out = filter_rollout(&public, gain, &traj)?;
        let rhs = a.dot(&out.estimate);
        let mut lhs = adj.b.dot(&model.m0);
        let mut scale = lhs.abs();
        for t in 0..horizon {
            let term = adj.u[t].dot(&traj.y(t));
            lhs += term;
            scale += term.abs();
        }
        let rel = (lhs - rhs).abs() / scale.max(rhs.abs()).max(f64::MIN_POSITIVE);
        let states = traj.states.as_ref().expect("states recorded");
        let state_err = (a.dot(&states.column(horizon)) - rhs).powi(2);
        Ok((rel, state_err, out.error.norm_squared()))
    })?;

    let pairing_max_rel_err = per_sample.iter().map(|s| s.0).fold(0.0, f64::max);
    let state: Vec<f64> = per_sample.iter().map(|s| s.1).collect();
    let pred: Vec<f64> = per_sample.iter().map(|s| s.2).collect();
    Ok(DualityReport {
        horizon,
        num_samples,
        pairing_max_rel_err,
        pairing_pass: pairing_max_rel_err <= PAIRING_REL_TOL,
        state_error: MonteCarloCheck::new(&state, a.dot(&(&fh.x_t * a))),
        prediction_error: MonteCarloCheck::new(&pred, fh.j_est),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub s: f64,
    pub rho: f64,
    pub j: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoercivityProfile {
    /// Step length at which `ρ(A_L) = 1 − 1e-4` (bisected), if the ray leaves
    /// the stabilizing set; `None` for rays that stay inside it.
    pub s_boundary: Option<f64>,
    pub points: Vec<ProfilePoint>,
    pub monotone: bool,
}

impl CoercivityProfile {
    pub fn final_cost(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.j)
    }
}

const BOUNDARY_RHO: f64 = 1.0 - 1e-4;

/// Evaluates `J(L* + s·D)` on a grid accumulating at the stability boundary
/// (`s_k = s_b (1 − 2^{−k})`, last point `s_b`). Rays that never leave the
/// stabilizing set are probed at `s = 10^k` instead.
pub fn coercivity_probe(model: &SystemModel, l_star: &GainPolicy, direction: &Matrix, steps: usize) -> Result<CoercivityProfile> {
    if direction.norm() == 0.0 {
        return Err(Error::Parameter("direction must be nonzero".into()));
    }
    if steps < 2 {
        return Err(Error::Parameter("steps must be >= 2".into()));
    }
    l_star.require_stabilizing()?;
    let at = |s: f64| GainPolicy::for_model(model, &l_star.l + direction * s);

    let mut hi = 1.0;
    let mut found = false;
    for _ in 0..80 {
        if at(hi)?.rho >= BOUNDARY_RHO {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    let grid: Vec<f64> = if found {
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid)?.rho < BOUNDARY_RHO {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        // Largest s on the stabilizing side of the bisection bracket.
        let sb = lo;
        let mut g: Vec<f64> = (0..steps - 1).map(|k| sb * (1.0 - 0.5f64.powi(k as i32))).collect();
        g.push(sb);
        g
    } else {
        (0..steps).map(|k| 10f64.powi(k as i32)).collect()
    };

    let mut points = Vec::with_capacity(grid.len());
    for s in grid {
        let g = at(s)?;
        points.push(ProfilePoint {
            s,
            rho: g.rho,
            j: cost_value(model, &g)?.value(),
        });
    }
    let monotone = points.windows(2).skip(1).all(|w| w[1].j >= w[0].j);
    Ok(CoercivityProfile {
        s_boundary: found.then(|| points.last().map(|p| p.s).unwrap_or(0.0)),
        points,
        monotone,
    })
}

/// One sampled gain in a sublevel set around the optimum.
#[derive(Debug, Clone, Serialize)]
pub struct LandscapeSample {
    pub j: f64,
    pub gap: f64,
    pub grad_norm_sq: f64,
    pub dist_sq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LandscapeSummary {
    pub samples: Vec<LandscapeSample>,
    pub acceptance_rate: f64,
    /// `max (J − J*) / ‖∇J‖²`: an empirical `1/c₁`.
    pub max_gap_over_grad_sq: f64,
    /// `min (J − J*) / ‖L − L*‖²`: an empirical `c₃`.
    pub min_gap_over_dist_sq: f64,
}

/// Rejection-samples `L = L* + σ N(0, I)` inside `{J ≤ level}`, adapting
/// `σ` between batches toward a 50% acceptance rate.
pub fn sample_sublevel_set(model: &SystemModel, l_star: &GainPolicy, level: f64, count: usize, seed: u64) -> Result<LandscapeSummary> {
    let star = cost(model, l_star)?;
    if level <= star.j {
        return Err(Error::Parameter("sublevel must exceed J(L*)".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut sigma = 0.1 * l_star.l.norm().max(1.0);
    let mut samples = Vec::with_capacity(count);
    let (mut tried, mut accepted_total) = (0usize, 0usize);
    while samples.len() < count {
        let mut accepted = 0;
        for _ in 0..20 {
            tried += 1;
            let noise = Matrix::from_fn(l_star.l.nrows(), l_star.l.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let cand = GainPolicy::for_model(model, &l_star.l + noise * sigma)?;
            if !cand.stabilizing {
                continue;
            }
            let eval = exact_gradient(model, &cand)?;
            if eval.j > level {
                continue;
            }
            accepted += 1;
            if samples.len() < count {
                let grad = eval.grad.expect("gradient requested");
                samples.push(LandscapeSample {
                    j: eval.j,
                    gap: eval.j - star.j,
                    grad_norm_sq: grad.norm_squared(),
                    dist_sq: (&cand.l - &l_star.l).norm_squared(),
                });
            }
        }
        accepted_total += accepted;
        sigma *= match accepted {
            0..=6 => 0.7,
            14.. => 1.4,
            _ => 1.0,
        };
        if tried > 1_000_000 {
            return Err(Error::Numerical("sublevel sampling stalled".into()));
        }
    }
    let max_gap_over_grad_sq = samples
        .iter()
        .map(|s| s.gap / s.grad_norm_sq)
        .fold(0.0, f64::max);
    let min_gap_over_dist_sq = samples
        .iter()
        .map(|s| s.gap / s.dist_sq)
        .fold(f64::INFINITY, f64::min);
    Ok(LandscapeSummary {
        samples,
        acceptance_rate: accepted_total as f64 / tried as f64,
        max_gap_over_grad_sq,
        min_gap_over_dist_sq,
    })
}
