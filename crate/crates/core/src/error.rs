use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("tag `{tag}` is not valid for the {family} problem")]
    IncompatibleTag { tag: String, family: &'static str },

    #[error("jump_flux row at {point:?} requires an interface normal")]
    MissingNormal { point: Vec<f64> },

    #[error("row {row} of group `{group}` at {point:?} is identically zero; its penalty weight is undefined")]
    ZeroRow { row: usize, group: String, point: Vec<f64> },

    #[error("least-squares system is underdetermined: {rows} rows for {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },

    #[error("least-squares matrix has numerical rank 0 (sigma_max = {sigma_max:e})")]
    RankZero { sigma_max: f64 },

    #[error("Newton-LLSQ Jacobian is singular to tolerance at iteration {iteration}: rank {rank} of {cols}")]
    SingularJacobian { iteration: usize, rank: usize, cols: usize },

    #[error("no scale p >= 0.1 keeps the first-layer pre-activations within [-3, 3]; use J <= 2")]
    NoAdmissibleScale,

    #[error("Cholesky factorisation failed even with jitter {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("CFL condition violated: max|a| dt/dx = {cfl:.4} > 1; refine the time grid")]
    Cfl { cfl: f64 },

    #[error(
        "Newton iteration failed to converge at time step {step} after {iterations} iterations (residual {residual:e})"
    )]
    NewtonDiverged {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    TrainingDiverged { iteration: usize },

    #[error("oracle failure for sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parity check failed: max deviation {deviation:e} exceeds {tol:e}")]
    Parity { deviation: f64, tol: f64 },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for failures that come from the numerics rather than from the
    /// caller's configuration or the filesystem.
    pub fn is_numerical(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            Error::NonFinite(_)
                | Error::ZeroRow { .. }
                | Error::RankZero { .. }
                | Error::SingularJacobian { .. }
                | Error::NoAdmissibleScale
                | Error::Cholesky { .. }
                | Error::Cfl { .. }
                | Error::NewtonDiverged { .. }
                | Error::TrainingDiverged { .. }
                | Error::Sample { .. }
                | Error::Underdetermined { .. }
                | Error::Parity { .. }
        )
    }
}
