use thiserror::Error;

use crate::lattice::Site;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("site {site} is not full (mass {mass})")]
    NotFull { site: Site, mass: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("odometer support touches the box boundary at {site}")]
    BoxTooSmall { site: Site },

    #[error("lateral truncation lost mass {lost:e} (limit {limit:e}); increase the lateral radius")]
    Truncation { lost: f64, limit: f64 },

    #[error("walk {walk} exceeded {cap} steps without leaving the cluster")]
    RunawayWalk { walk: u64, cap: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("the fundamental solution is singular at the space-time origin")]
    SingularPoint,

    #[error("non-coincidence set reaches the grid boundary at x = {x:?}, t = {t}; widen the grid")]
    BoundaryContact { x: Vec<f64>, t: f64 },

    #[error("no grid node has a positive odometer")]
    EmptyShape,

    #[error("empty point set")]
    EmptySet,

    #[error("rescaling fit residual {residual:.4} exceeds {limit}")]
    FitFailure { residual: f64, limit: f64 },

    #[error("quadrature did not reach tolerance {tolerance:e} (last change {change:e})")]
    Quadrature { tolerance: f64, change: f64 },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for validation problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParams(_)
            | Error::Domain(_)
            | Error::SingularPoint
            | Error::Parse(_)
            | Error::NotFull { .. }
            | Error::EmptySet
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::NonConvergence { .. }
            | Error::BoxTooSmall { .. }
            | Error::Truncation { .. }
            | Error::RunawayWalk { .. }
            | Error::BoundaryContact { .. }
            | Error::EmptyShape
            | Error::FitFailure { .. }
            | Error::Quadrature { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
