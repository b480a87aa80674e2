use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pipeline cannot carry {mfr} kg/s from an inlet pressure of {p_in} Pa (radicand {radicand:.3e})")]
    NonPhysicalSteadyState { p_in: f64, mfr: f64, radicand: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("Newton iteration diverged at step {step} (last residual {residual:.3e})")]
    NewtonDivergence { step: usize, residual: f64 },

    #[error("non-physical state at step {step}: {detail}")]
    NonPhysicalState { step: usize, detail: String },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("excitation out of bounds: {0}")]
    ExcitationOutOfBounds(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("regressor matrix is rank deficient")]
    RankDeficient,

    #[error("constrained fit did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("stability certificate failed: spectral radius {0}")]
    StabilityCertificate(f64),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("unsupported file version: expected {expected}, found {actual}")]
    Version { expected: u32, actual: u32 },

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("linear program is infeasible: {0}")]
    Infeasible(String),

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("LP solver failed: {0}")]
    Solver(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad input files or parameters rather than by
    /// the numerics (used by the CLI to pick an exit code).
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams(_)
                | Error::Spec(_)
                | Error::SchemaMismatch(_)
                | Error::Version { .. }
                | Error::Json(_)
                | Error::Io(_)
                | Error::Topology(_)
                | Error::ExcitationOutOfBounds(_)
                | Error::DimensionMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
