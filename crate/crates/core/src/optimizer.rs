//! Policy-update loops on the gain: gradient descent, explicit-Euler gradient
//! flow, and minibatch SGD driven by measurement-only gradients.
//!
//! Every loop rejects steps that leave the stabilizing set by halving the
//! step size, so each recorded iterate has `ρ(A − L_k H) < 1`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::kalman::{dare_gain, DEFAULT_DARE_MAX_ITER, DEFAULT_DARE_TOL};
use crate::objective::{cost, exact_gradient, GainPolicy};
use crate::par::Exec;
use crate::rng::derive_seed;
use crate::sgd::{default_window, minibatch_gradient_with};
use crate::sysmodel::{is_observable, PublicModel, Simulator, SystemModel, Trajectory};
use crate::{Error, Matrix, Result};

/// Relative cost differences below this are treated as rounding noise.
const ROUNDING_SLACK: f64 = 64.0 * f64::EPSILON;

pub const MAX_HALVINGS: usize = 60;
pub const DEFAULT_GRAD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Fixed,
    Backtracking,
    Decaying,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepPolicy {
    pub kind: StepKind,
    pub eta0: f64,
    pub backtrack_factor: f64,
    pub armijo_c: f64,
    pub decay_exponent: f64,
    /// Iteration scale `τ` of the decaying schedule `η₀ / (1 + k/τ)^p`.
    pub decay_scale: f64,
}

impl Default for StepPolicy {
    /// The SGD schedule `η_k = 0.05 / (1 + k)^0.6`.
    fn default() -> Self {
        StepPolicy {
            kind: StepKind::Decaying,
            eta0: 0.05,
            backtrack_factor: 0.5,
            armijo_c: 1e-4,
            decay_exponent: 0.6,
            decay_scale: 1.0,
        }
    }
}

impl StepPolicy {
    pub fn fixed(eta: f64) -> Self {
        StepPolicy {
            kind: StepKind::Fixed,
            eta0: eta,
            ..Default::default()
        }
    }

    pub fn backtracking(eta0: f64) -> Self {
        StepPolicy {
            kind: StepKind::Backtracking,
            eta0,
            ..Default::default()
        }
    }

    pub fn decaying(eta0: f64, exponent: f64) -> Self {
        StepPolicy {
            kind: StepKind::Decaying,
            eta0,
            decay_exponent: exponent,
            ..Default::default()
        }
    }

    /// `η₀ / (1 + k/τ)^p`.
    pub fn decaying_scaled(eta0: f64, exponent: f64, scale: f64) -> Self {
        StepPolicy {
            decay_scale: scale,
            ..Self::decaying(eta0, exponent)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Parameter(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Parameter("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Parameter("armijo_c must lie in (0, 1)".into()));
        }
        if !(self.decay_exponent >= 0.0) {
            return Err(Error::Parameter("decay_exponent must be nonnegative".into()));
        }
        if !(self.decay_scale > 0.0 && self.decay_scale.is_finite()) {
            return Err(Error::Parameter("decay_scale must be positive".into()));
        }
        Ok(())
    }

    /// Nominal step size at iteration `k`.
    pub fn eta(&self, k: usize) -> f64 {
        match self.kind {
            StepKind::Decaying => self.eta0 / (1.0 + k as f64 / self.decay_scale).powf(self.decay_exponent),
            StepKind::Fixed | StepKind::Backtracking => self.eta0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriteria {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria {
            grad_tol: DEFAULT_GRAD_TOL,
            max_iter: 10_000,
        }
    }
}

/// State of one iterate. `eta` is the step taken from this iterate to the
/// next (absent on the last record).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub l: Matrix,
    /// `J(L_k)`, when the true cost is available.
    pub j: Option<f64>,
    /// Mean squared prediction error over the minibatch (SGD only).
    pub batch_error: Option<f64>,
    /// `‖∇J‖_F`, or `‖ĝ‖_F` for SGD.
    pub grad_norm: Option<f64>,
    pub eta: Option<f64>,
    pub rho: f64,
    pub gain_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum TerminalStatus {
    Converged,
    MaxIter,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub terminal_status: TerminalStatus,
}

impl OptimizerTrace {
    pub fn final_gain(&self) -> &Matrix {
        &self.records.last().expect("trace is never empty").l
    }

    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.j.unwrap_or(f64::NAN)).collect()
    }

    /// Writes the trace with columns `k,J,J_norm,grad_norm,eta,rho,gain_err`.
    /// `J` falls back to the batch error when the true cost is withheld;
    /// `J_norm` is `J(L_k)/J(L_0)`. Missing values are blank.
    pub fn write_csv<W: Write>(&self, out: W, include_gain_err: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "J", "J_norm", "grad_norm", "eta", "rho", "gain_err"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let j0 = self.records.first().and_then(|r| r.j.or(r.batch_error));
        for r in &self.records {
            let j = r.j.or(r.batch_error);
            let j_norm = match (j, j0) {
                (Some(j), Some(j0)) if r.j.is_some() => Some(j / j0),
                _ => None,
            };
            w.write_record([
                r.k.to_string(),
                opt(j),
                opt(j_norm),
                opt(r.grad_norm),
                opt(r.eta),
                format!("{:.17e}", r.rho),
                if include_gain_err { opt(r.gain_err) } else { String::new() },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A stabilizing starting gain computed from `A` and `H` only: zero when `A`
/// is already Schur, otherwise the Kalman gain for `Q = I`, `R = I`.
pub fn initial_gain(public: &PublicModel) -> Result<GainPolicy> {
    let zero = GainPolicy::new(&public.a, &public.h, Matrix::zeros(public.n(), public.m()))?;
    if zero.stabilizing {
        return Ok(zero);
    }
    if !is_observable(&public.a, &public.h).observable {
        return Err(Error::Input("(A, H) is not observable".into()));
    }
    let surrogate = SystemModel::new(
        public.a.clone(),
        public.h.clone(),
        Matrix::identity(public.n(), public.n()),
        Matrix::identity(public.m(), public.m()),
        Matrix::identity(public.n(), public.n()),
        public.m0.clone(),
    )?;
    let sol = dare_gain(&surrogate, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)?;
    GainPolicy::new(&public.a, &public.h, sol.l_inf)
}

/// Halves `eta` from `eta_start` until `L − η g` is stabilizing and
/// `J(L − η g) ≤ J(L) − c η ‖g‖²`.
#[allow(clippy::too_many_arguments)]
fn line_search(
    model: &SystemModel,
    gain: &GainPolicy,
    j_current: f64,
    g: &Matrix,
    eta_start: f64,
    factor: f64,
    c: f64,
    iteration: usize,
) -> Result<(GainPolicy, f64, f64)> {
    let g_sq = g.norm_squared();
    if g_sq == 0.0 {
        return Ok((gain.clone(), eta_start, j_current));
    }
    let mut eta = eta_start;
    for _ in 0..=MAX_HALVINGS {
        let cand = GainPolicy::for_model(model, &gain.l - g * eta)?;
        if cand.l == gain.l {
            break;
        }
        if cand.stabilizing {
            let j = cost(model, &cand)?.j;
            if (j - j_current).abs() > ROUNDING_SLACK * j_current.abs() {
                if j <= j_current - c * eta * g_sq {
                    return Ok((cand, eta, j));
                }
            } else {
                // The cost difference is lost in rounding; use the trapezoid
                // estimate J(L − ηg) − J(L) ≈ −η(‖g‖² + ⟨∇J(L − ηg), g⟩)/2.
                let g_new = exact_gradient(model, &cand)?.grad.expect("gradient requested");
                if g_sq + g_new.dot(g) >= 2.0 * c * g_sq {
                    return Ok((cand, eta, j));
                }
            }
        }
        eta *= factor;
    }
    Err(Error::StepFailure {
        iteration,
        halvings: MAX_HALVINGS,
    })
}

/// One Armijo backtracking step from `gain` along `−g`.
pub fn backtracking_step(model: &SystemModel, gain: &GainPolicy, g: &Matrix, policy: &StepPolicy) -> Result<(GainPolicy, f64)> {
    policy.validate()?;
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("gradient has non-finite entries".into()));
    }
    let j = cost(model, gain)?.j;
    let (next, eta, _) = line_search(model, gain, j, g, policy.eta0, policy.backtrack_factor, policy.armijo_c, 0)?;
    Ok((next, eta))
}

fn reference_gain(model: &SystemModel) -> Option<Matrix> {
    dare_gain(model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)
        .ok()
        .map(|s| s.l_inf)
}

/// Gradient descent `L_{k+1} = L_k − η_k ∇J(L_k)`.
///
/// Backtracking uses the Armijo test; fixed and decaying schedules only
/// shrink the step when the candidate is not stabilizing or would increase
/// `J`, so `J` is nonincreasing along every trace up to rounding.
pub fn gd_run(model: &SystemModel, l0: &GainPolicy, policy: &StepPolicy, stop: &StopCriteria) -> Result<OptimizerTrace> {
    policy.validate()?;
    model.check_for_objective()?;
    if !l0.stabilizing {
        return Err(Error::Instability { rho: l0.rho });
    }
    let l_ref = reference_gain(model);
    let mut gain = l0.clone();
    let mut records = Vec::new();
    let mut k = 0;
    loop {
        let eval = exact_gradient(model, &gain)?;
        let g = eval.grad.expect("gradient requested");
        let grad_norm = g.norm();
        let mut rec = IterationRecord {
            k,
            l: gain.l.clone(),
            j: Some(eval.j),
            batch_error: None,
            grad_norm: Some(grad_norm),
            eta: None,
            rho: gain.rho,
            gain_err: l_ref.as_ref().map(|r| (&gain.l - r).norm()),
        };
        if grad_norm <= stop.grad_tol {
            records.push(rec);
            return Ok(OptimizerTrace {
                records,
                terminal_status: TerminalStatus::Converged,
            });
        }
        if k == stop.max_iter {
            records.push(rec);
            return Ok(OptimizerTrace {
                records,
                terminal_status: TerminalStatus::MaxIter,
            });
        }
        let c = match policy.kind {
            StepKind::Backtracking => policy.armijo_c,
            StepKind::Fixed | StepKind::Decaying => 0.0,
        };
        let step = line_search(model, &gain, eval.j, &g, policy.eta(k), policy.backtrack_factor, c, k);
        let (next, eta, _) = match step {
            Ok(s) => s,
            Err(e @ Error::StepFailure { .. }) => {
                records.push(rec);
                return Ok(OptimizerTrace {
                    records,
                    terminal_status: TerminalStatus::Failed(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        };
        rec.eta = Some(eta);
        records.push(rec);
        gain = next;
        k += 1;
    }
}

/// Explicit-Euler integration of `L̇ = −∇J(L)` with step `h`, halving the
/// step whenever it would leave the stabilizing set or increase `J`.
pub fn gf_run(model: &SystemModel, l0: &GainPolicy, step_h: f64, stop: &StopCriteria) -> Result<OptimizerTrace> {
    if !(step_h > 0.0) {
        return Err(Error::Parameter(format!("step_h must be positive, got {step_h}")));
    }
    gd_run(model, l0, &StepPolicy::fixed(step_h), stop)
}

/// Seeded source of fresh measurement trajectories.
pub trait TrajectorySource: Sync {
    /// Trajectory number `index` of minibatch `iteration`, with `window`
    /// history samples.
    fn draw(&self, iteration: usize, index: usize, window: usize) -> Result<Trajectory>;
}

/// Simulates the true system; each draw is seeded by
/// `(seed, iteration, index)`.
pub struct SimulatedSource {
    sim: Simulator,
    pub burn_in: usize,
    pub seed: u64,
}

impl SimulatedSource {
    pub fn new(model: &SystemModel, burn_in: usize, seed: u64) -> Result<Self> {
        Ok(SimulatedSource {
            sim: Simulator::new(model)?,
            burn_in,
            seed,
        })
    }
}

impl TrajectorySource for SimulatedSource {
    fn draw(&self, iteration: usize, index: usize, window: usize) -> Result<Trajectory> {
        let seed = derive_seed(self.seed, &[iteration as u64, index as u64]);
        self.sim.run(self.burn_in, window, seed, false)
    }
}

/// Holds the full model out of the learner's reach and answers only
/// `J(L)` and `‖L − L∞‖_F`, for reporting.
pub struct CostOracle {
    model: SystemModel,
    l_inf: Matrix,
    reveal_gain_error: bool,
}

impl CostOracle {
    pub fn new(model: &SystemModel, reveal_gain_error: bool) -> Result<Self> {
        let l_inf = dare_gain(model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)?.l_inf;
        Ok(CostOracle {
            model: model.clone(),
            l_inf,
            reveal_gain_error,
        })
    }

    pub fn cost(&self, l: &Matrix) -> Option<f64> {
        let gain = GainPolicy::for_model(&self.model, l.clone()).ok()?;
        cost(&self.model, &gain).ok().map(|e| e.j)
    }

    pub fn gain_error(&self, l: &Matrix) -> Option<f64> {
        self.reveal_gain_error.then(|| self.report_gain_error(l))
    }

    /// Gain error for end-of-run reporting; never fed back to the learner.
    pub fn report_gain_error(&self, l: &Matrix) -> f64 {
        (l - &self.l_inf).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "length")]
pub enum WindowRule {
    Fixed(usize),
    /// Smallest `T` with `ρ(A_{L_k})^T ≤ 1e-8`, capped at 1000.
    Adaptive,
}

impl WindowRule {
    fn length(self, gain: &GainPolicy) -> usize {
        match self {
            WindowRule::Fixed(t) => t,
            WindowRule::Adaptive => default_window(gain.rho),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgdSettings {
    pub schedule: StepPolicy,
    pub batch_size: usize,
    pub iterations: usize,
    pub window: WindowRule,
    pub exec: Exec,
}

/// Minibatch SGD `L_{k+1} = L_k − η_k ĝ_k` where `ĝ_k` averages
/// measurement-only sample gradients over `M` fresh trajectories. Steps that
/// leave the stabilizing set are halved (projection by rejection).
pub fn sgd_run(
    public: &PublicModel,
    source: &dyn TrajectorySource,
    l0: &GainPolicy,
    settings: &SgdSettings,
    oracle: Option<&CostOracle>,
) -> Result<OptimizerTrace> {
    settings.schedule.validate()?;
    if settings.batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    if let WindowRule::Fixed(0) = settings.window {
        return Err(Error::Parameter("window must be >= 1".into()));
    }
    if !l0.stabilizing {
        return Err(Error::Instability { rho: l0.rho });
    }
    let mut gain = l0.clone();
    let mut records = Vec::with_capacity(settings.iterations + 1);
    for k in 0..=settings.iterations {
        let mut rec = IterationRecord {
            k,
            l: gain.l.clone(),
            j: oracle.and_then(|o| o.cost(&gain.l)),
            batch_error: None,
            grad_norm: None,
            eta: None,
            rho: gain.rho,
            gain_err: oracle.and_then(|o| o.gain_error(&gain.l)),
        };
        if k == settings.iterations {
            records.push(rec);
            break;
        }
        let window = settings.window.length(&gain);
        let mb = minibatch_gradient_with(public, &gain, settings.batch_size, settings.exec, |i| {
            source.draw(k, i, window)
        })?;
        rec.batch_error = Some(mb.mean_squared_error);
        rec.grad_norm = Some(mb.mean_grad.norm());

        let mut eta = settings.schedule.eta(k);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = GainPolicy::new(&public.a, &public.h, &gain.l - &mb.mean_grad * eta)?;
            if cand.stabilizing {
                accepted = Some(cand);
                break;
            }
            eta *= settings.schedule.backtrack_factor;
        }
        let Some(next) = accepted else {
            records.push(rec);
            return Ok(OptimizerTrace {
                records,
                terminal_status: TerminalStatus::Failed(
                    Error::StepFailure {
                        iteration: k,
                        halvings: MAX_HALVINGS,
                    }
                    .to_string(),
                ),
            });
        };
        rec.eta = Some(eta);
        records.push(rec);
        gain = next;
    }
    Ok(OptimizerTrace {
        records,
        terminal_status: TerminalStatus::MaxIter,
    })
}
