//! Measurement-only gradient of the squared prediction error.
//!
//! For a window `y(0), …, y(T−1)`, target `y(T)` and gain `L`, let
//! `e = y(T) − H x̂_L(T)` and `ε(L) = ‖e‖²`. With
//! `v_s = (A_Lᵀ)^s Hᵀ e` the gradient is
//!
//! ```text
//! ∇ε = −2 Σ_{s=0}^{T−1} v_s y(T−1−s)ᵀ
//!      + 2 Σ_{t=1}^{T−1} Σ_{k=1}^{t} v_{t−k} y(T−1−t)ᵀ Lᵀ (A_Lᵀ)^{k−1} Hᵀ
//!      + 2 Σ_{k=1}^{T} v_{T−k} m0ᵀ (A_Lᵀ)^{k−1} Hᵀ
//! ```
//!
//! The last line is the initial-mean contribution of a finite window; it is
//! zero for `m0 = 0` and decays like `ρ(A_L)^T`. Only `A`, `H`, `m0` and the
//! measurements enter, never the noise covariances.
//!
//! The double sum is evaluated in `O(T n²)` by regrouping on `s = t − k`:
//! `Σ_s v_s (H r_s)ᵀ` with `r_s = Σ_{t>s} A_L^{t−s−1} c_t`,
//! `c_t = L y(T−1−t)` (`c_T = m0`), which obeys `r_s = c_{s+1} + A_L r_{s+1}`.

use serde::Serialize;

use crate::kalman::filter_rollout;
use crate::objective::GainPolicy;
use crate::par::{pairwise_sum, Exec};
use crate::sysmodel::{decay_horizon, PublicModel, Trajectory};
use crate::{Error, Matrix, Result, Vector};

/// Terms with `‖A_L^s‖_F` below this are dropped.
pub const TRUNCATION_LEVEL: f64 = 1e-12;

/// Default window length for a closed-loop spectral radius: the smallest `T`
/// with `ρ^T ≤ 1e-8`, capped at 1000.
pub fn default_window(rho: f64) -> usize {
    decay_horizon(rho, 1e-8, 1_000)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleGradient {
    pub grad: Matrix,
    /// `e_T(L)`.
    pub error_vector: Vector,
    /// Number of `v_s` terms kept.
    pub truncation_depth: usize,
}

impl SampleGradient {
    pub fn squared_error(&self) -> f64 {
        self.error_vector.norm_squared()
    }
}

/// Gradient of `‖y(T) − ŷ_L(T)‖²` with respect to `L` on one trajectory.
pub fn sample_gradient(public: &PublicModel, gain: &GainPolicy, traj: &Trajectory) -> Result<SampleGradient> {
    if !gain.stabilizing {
        return Err(Error::Instability { rho: gain.rho });
    }
    let out = filter_rollout(public, gain, traj)?;
    let e = out.error;
    let n = public.n();
    let m = public.m();
    let w = traj.window_length;

    // v_s = (A_Lᵀ)^s Hᵀ e for s < depth.
    let a_lt = gain.a_l.transpose();
    let mut v = Matrix::zeros(n, w);
    let mut power = Matrix::identity(n, n);
    let mut vs = public.h.transpose() * &e;
    let mut depth = 0;
    while depth < w && power.norm() >= TRUNCATION_LEVEL {
        v.column_mut(depth).copy_from(&vs);
        vs = &a_lt * vs;
        power = &gain.a_l * power;
        depth += 1;
    }

    let mut grad = Matrix::zeros(n, m);
    // First sum.
    for s in 0..depth {
        grad.ger(-2.0, &v.column(s), &traj.y(w - 1 - s), 1.0);
    }
    // Regrouped double sum plus initial-mean term.
    let mut r = Vector::zeros(n);
    let mut next = Vector::zeros(n);
    let mut hr = Vector::zeros(m);
    for s in (0..w).rev() {
        // r_s = c_{s+1} + A_L r_{s+1}
        next.gemv(1.0, &gain.a_l, &r, 0.0);
        if s + 1 == w {
            next += &public.m0;
        } else {
            next.gemv(1.0, &gain.l, &traj.y(w - 2 - s), 1.0);
        }
        std::mem::swap(&mut r, &mut next);
        if s < depth {
            hr.gemv(1.0, &public.h, &r, 0.0);
            grad.ger(2.0, &v.column(s), &hr, 1.0);
        }
    }

    Ok(SampleGradient {
        grad,
        error_vector: e,
        truncation_depth: depth,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MinibatchGradient {
    pub mean_grad: Matrix,
    /// Sample standard deviation over `sqrt(M)`, entrywise.
    pub per_entry_std_err: Matrix,
    pub batch_size: usize,
    /// Mean of `‖e_T‖²` over the batch.
    pub mean_squared_error: f64,
}

fn reduce(samples: &[SampleGradient]) -> MinibatchGradient {
    let (n, m) = samples[0].grad.shape();
    let count = samples.len() as f64;
    let grads: Vec<Matrix> = samples.iter().map(|s| s.grad.clone()).collect();
    let zero = Matrix::zeros(n, m);
    let mean = pairwise_sum(&grads, &zero) / count;
    let per_entry_std_err = if samples.len() > 1 {
        let sq: Vec<Matrix> = grads.iter().map(|g| (g - &mean).map(|d| d * d)).collect();
        (pairwise_sum(&sq, &zero) / ((count - 1.0) * count)).map(f64::sqrt)
    } else {
        zero
    };
    let errs: Vec<f64> = samples.iter().map(SampleGradient::squared_error).collect();
    MinibatchGradient {
        mean_grad: mean,
        per_entry_std_err,
        batch_size: samples.len(),
        mean_squared_error: pairwise_sum(&errs, &0.0) / count,
    }
}

/// Averages [`sample_gradient`] over a batch in batch order.
pub fn minibatch_gradient(public: &PublicModel, gain: &GainPolicy, batch: &[Trajectory], exec: Exec) -> Result<MinibatchGradient> {
    if batch.is_empty() {
        return Err(Error::Parameter("batch must be nonempty".into()));
    }
    let samples = exec.try_map(batch.len(), |i| sample_gradient(public, gain, &batch[i]))?;
    Ok(reduce(&samples))
}

/// Like [`minibatch_gradient`] but generates trajectory `i` on demand, so the
/// simulation runs inside the parallel map as well.
pub fn minibatch_gradient_with<F>(public: &PublicModel, gain: &GainPolicy, batch_size: usize, exec: Exec, make: F) -> Result<MinibatchGradient>
where
    F: Fn(usize) -> Result<Trajectory> + Sync + Send,
{
    if batch_size == 0 {
        return Err(Error::Parameter("batch must be nonempty".into()));
    }
    let samples = exec.try_map(batch_size, |i| sample_gradient(public, gain, &make(i)?))?;
    Ok(reduce(&samples))
}
