use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no data: {0}")]
    NoData(String),

    #[error("degenerate equilibrium: {0}")]
    DegenerateEquilibrium(String),

    #[error("singular pressure derivative at rho0 = {0}")]
    SingularPressure(f64),

    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    #[error("CFL violation: dt = {dt} exceeds stable limit {limit} (suggested dt <= {suggested})")]
    CflViolation { dt: f64, limit: f64, suggested: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
