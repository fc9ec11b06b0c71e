use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::optimizer::StepPolicy;
use crate::par::Exec;
use crate::sysmodel::{mass_spring_model, matrix_from_rows, SystemModel};
use crate::{Error, Matrix, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn d_dt() -> f64 {
    0.1
}
fn d_omega() -> f64 {
    1.0
}
fn d_var() -> f64 {
    0.1
}
fn d_p0() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    MassSpring {
        #[serde(default = "d_dt")]
        dt: f64,
        #[serde(default = "d_omega")]
        omega: f64,
        #[serde(default = "d_var")]
        q_var: f64,
        #[serde(default = "d_var")]
        r_var: f64,
        #[serde(default = "d_p0")]
        p0_var: f64,
    },
    Inline {
        model: SystemModel,
    },
    File {
        path: PathBuf,
    },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::MassSpring {
            dt: d_dt(),
            omega: d_omega(),
            q_var: d_var(),
            r_var: d_var(),
            p0_var: d_p0(),
        }
    }
}

impl ModelSource {
    pub fn load(&self) -> Result<SystemModel> {
        match self {
            ModelSource::MassSpring {
                dt,
                omega,
                q_var,
                r_var,
                p0_var,
            } => mass_spring_model(*dt, *omega, *q_var, *r_var, *p0_var)
                .map_err(|e| Error::config("model", e.to_string())),
            ModelSource::Inline { model } => Ok(model.clone()),
            ModelSource::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::config("model.path", format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::config("model.path", e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Gd,
    Gf,
    Sgd,
    Kalman,
    GradCheck,
    CheckDuality,
}

/// Starting gain for the optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Zero if `A` is Schur, otherwise the Kalman gain for `Q = R = I`.
    Surrogate,
    Explicit { l: Vec<Vec<f64>> },
    /// `L∞ + σ N(0, I)` conditioned on `ρ(A_L) ≤ max_rho`, drawn per seed.
    Random { sigma: f64, max_rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSource,
    pub mode: Mode,
    /// Reveal `Q`, `R` (oracle mode). Blind mode hides them from the
    /// learner; costs are still reported through a sealed oracle.
    pub oracle: bool,
    /// SGD window lengths `T`; also the horizons of the duality check.
    pub t_grid: Vec<usize>,
    /// SGD batch sizes `M`.
    pub m_grid: Vec<usize>,
    pub num_seeds: usize,
    pub seed0: u64,
    pub init: InitSpec,
    pub step: StepPolicy,
    /// SGD iteration budget `K`.
    pub iterations: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Euler step of the gradient flow.
    pub gf_step: f64,
    /// Discarded leading samples; `null` picks it from the decay rate of the
    /// reference gain.
    pub burn_in: Option<usize>,
    pub duality_samples: usize,
    /// Dual direction `a`; `null` uses the first coordinate vector.
    pub duality_direction: Option<Vec<f64>>,
    /// Number of random systems in `grad-check`.
    pub grad_check_systems: usize,
    pub exec: Exec,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelSource::default(),
            mode: Mode::Sgd,
            oracle: false,
            t_grid: vec![10, 50, 200],
            m_grid: vec![16, 64, 256],
            num_seeds: 20,
            seed0: 0,
            init: InitSpec::Surrogate,
            step: StepPolicy::default(),
            iterations: 2000,
            grad_tol: crate::optimizer::DEFAULT_GRAD_TOL,
            max_iter: 10_000,
            gf_step: 0.01,
            burn_in: None,
            duality_samples: 100_000,
            duality_direction: None,
            grad_check_systems: 20,
            exec: Exec::Parallel,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.t_grid.is_empty() || self.t_grid.contains(&0) {
            return Err(Error::config("t_grid", "must be nonempty with entries >= 1"));
        }
        if self.m_grid.is_empty() || self.m_grid.contains(&0) {
            return Err(Error::config("m_grid", "must be nonempty with entries >= 1"));
        }
        if self.num_seeds == 0 {
            return Err(Error::config("num_seeds", "must be >= 1"));
        }
        self.step
            .validate()
            .map_err(|e| Error::config("step", e.to_string()))?;
        if !(self.gf_step > 0.0) {
            return Err(Error::config("gf_step", "must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::config("grad_tol", "must be positive"));
        }
        if self.duality_samples == 0 {
            return Err(Error::config("duality_samples", "must be >= 1"));
        }
        if let InitSpec::Random { sigma, max_rho } = self.init {
            if !(sigma > 0.0) || !(max_rho > 0.0 && max_rho < 1.0) {
                return Err(Error::config("init", "random init needs sigma > 0 and max_rho in (0, 1)"));
            }
        }
        if matches!(self.mode, Mode::Gd | Mode::Gf) && !self.oracle {
            return Err(Error::config(
                "mode",
                "exact-gradient modes need the noise covariances; use oracle mode",
            ));
        }
        Ok(())
    }

    pub(crate) fn explicit_gain(l: &[Vec<f64>]) -> Result<Matrix> {
        matrix_from_rows(l, "init.l").map_err(|e| Error::config("init.l", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        let again = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(again, text);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"mode": "kalman", "model": {"kind": "mass_spring", "dt": 0.2}}"#).unwrap();
        assert_eq!(cfg.mode, Mode::Kalman);
        assert_eq!(cfg.num_seeds, 20);
        match cfg.model {
            ModelSource::MassSpring { dt, q_var, .. } => {
                assert_eq!(dt, 0.2);
                assert_eq!(q_var, 0.1);
            }
            _ => panic!("wrong model source"),
        }
    }

    #[test]
    fn errors_carry_field_paths() {
        let err = ExperimentConfig::from_json(r#"{"m_grid": []}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "m_grid"));
        let err = ExperimentConfig::from_json(r#"{"num_seeds": 0}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "num_seeds"));
        let err = ExperimentConfig::from_json(r#"{"mode": "gd"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "mode"));
        let err = ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
