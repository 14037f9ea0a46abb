use thiserror::Error;

/// Errors surfaced by the numerical pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("integration diverged at t = {last_t}: state exceeded {threshold:e}")]
    IntegrationDiverged { last_t: f64, threshold: f64 },

    #[error("perturbation is not linear-homogeneous; variational flow is undefined")]
    UnsupportedPerturbation,

    #[error(
        "window {window} too small: tail bound {tail:e} exceeds tolerance {tol:e}; \
         a window of at least {required} is needed"
    )]
    TailTooLarge {
        window: f64,
        tail: f64,
        tol: f64,
        required: f64,
    },

    #[error("sampled transition-matrix norms do not decay; the field is not contractive")]
    NotContractive,

    #[error("Picard iteration did not converge within {iterations} iterations (last defect {defect:e})")]
    NoConvergence { iterations: usize, defect: f64 },

    #[error("backward flow overflowed at s = {s}; window {window} is too large for this state")]
    WindowTooLarge { window: f64, s: f64 },

    #[error("empty modulus sample")]
    EmptySample,

    #[error("degenerate fit: all sampled value gaps are zero")]
    DegenerateFit,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
