use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: wrong shapes, non-finite entries, indefinite covariances.
    #[error("input error: {0}")]
    Input(String),

    /// A tuning parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The closed-loop matrix is not Schur stable, so the steady-state cost is infinite.
    #[error("not Schur stable: spectral radius {rho}")]
    Instability { rho: f64 },

    /// A factorization or iteration broke down.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    /// Backtracking exhausted its halvings without an acceptable step.
    #[error("step failure after {halvings} halvings at iteration {iteration}")]
    StepFailure { iteration: usize, halvings: usize },

    /// Invalid experiment configuration, tagged with the offending field path.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI: 1 for configuration or input
    /// problems, 2 for numerical or optimizer failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Input(_) | Error::Parameter(_) | Error::Json(_) => 1,
            Error::Io(_) | Error::Csv(_) => 1,
            Error::Instability { .. }
            | Error::Numerical(_)
            | Error::Convergence { .. }
            | Error::StepFailure { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
