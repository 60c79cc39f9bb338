use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument or state outside the physical domain of the model.
    #[error("domain error: {0}")]
    Domain(String),

    /// The per-stage interface equilibrium did not converge.
    #[error("algebraic solve failed at stage {stage}: residual {residual:.3e} after {iterations} iterations")]
    Algebraic {
        stage: usize,
        residual: f64,
        iterations: usize,
    },

    /// The implicit integrator or steady-state solver gave up.
    #[error("integration failed: {0}")]
    Integration(String),

    /// A steady-state target cannot be reached inside the input bounds.
    #[error("infeasible target y_set = {y_set:.6} (achievable range [{y_lo:.6}, {y_hi:.6}])")]
    InfeasibleTarget { y_set: f64, y_lo: f64, y_hi: f64 },

    /// The particle swarm could not place a single feasible particle.
    #[error("no feasible particle found after {draws} draws")]
    Infeasible { draws: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("weights file error: {0}")]
    Weights(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("scenario aborted at step {step}: {source}")]
    Scenario {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
