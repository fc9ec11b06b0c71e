//! Learning the steady-state Kalman gain of a known linear time-invariant
//! system whose noise covariances are unknown, by optimizing the filter gain
//! directly.
//!
//! The mean-squared prediction error of a constant-gain filter equals the
//! cost of a constant-feedback LQR problem on the adjoint system, which gives
//! a closed form for the steady-state cost `J(L)` and its gradient through two
//! Lyapunov solves ([`objective`]). When the covariances are available,
//! gradient descent or gradient flow on `J` recovers the Kalman gain
//! ([`optimizer`]). When they are not, a per-trajectory gradient of the
//! squared prediction error built from measurements alone drives stochastic
//! gradient descent ([`sgd`]).
//!
//! Ground truth comes from the Riccati recursion in [`kalman`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kalman;
pub mod matquad;
pub mod objective;
pub mod optimizer;
pub mod par;
pub mod rng;
pub mod sgd;
pub mod sysmodel;

pub use error::{Error, Result};

/// Dense column-major matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;

pub use kalman::{dare_gain, filter_rollout, kalman_step, KalmanSolution};
pub use matquad::{is_schur, solve_dlyap, spectral_radius, LyapunovSolution};
pub use objective::{cost, exact_gradient, CostEvaluation, GainPolicy};
pub use optimizer::{gd_run, gf_run, initial_gain, sgd_run, OptimizerTrace, StepPolicy};
pub use par::Exec;
pub use sgd::{minibatch_gradient, sample_gradient, MinibatchGradient, SampleGradient};
pub use sysmodel::{mass_spring_model, simulate_trajectory, PublicModel, SystemModel, Trajectory};

/// Crate version recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
