use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum MfgError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("CFL condition violated: courant number {courant:.4} exceeds 1 (max |s grad v| = {speed:.4e}, dt = {dt:.4e}, h = {h:.4e})")]
    Cfl {
        courant: f64,
        speed: f64,
        dt: f64,
        h: f64,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MfgError>;
