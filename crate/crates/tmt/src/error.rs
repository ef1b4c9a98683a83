use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum TmtError {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("trapped geodesic: arc length exceeded {max_len} without exiting (non-simple metric?)")]
    TrappedGeodesic { max_len: f64 },

    #[error("two-point shooting failed to converge after {iters} iterations (last miss {miss:.3e})")]
    ShootingFailure { iters: usize, miss: f64 },

    #[error("chart fold: geodesic family loses rank at x'={xp:.4}, x^n={xn:.4} (|J|={jac:.3e})")]
    ChartFold { xp: f64, xn: f64, jac: f64 },

    #[error("solver stagnation: reached residual {achieved:.3e} (target {target:.3e}) after {iters} iterations")]
    SolverStagnation {
        achieved: f64,
        target: f64,
        iters: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl TmtError {
    /// Process exit code for the CLI: 2 usage/config, 3 solver, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TmtError::Config { .. } | TmtError::Parse { .. } | TmtError::Argument(_) => 2,
            TmtError::SolverStagnation { .. } => 3,
            _ => 1,
        }
    }
}
