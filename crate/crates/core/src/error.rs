use thiserror::Error;

/// Crate-wide error type.
///
/// Each variant corresponds to a distinct failure class and maps to its own
/// process exit code in the CLI (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A kernel derivative was requested on the diagonal where it does not
    /// exist (exp-power with `p < 2`) and the configured convention forbids
    /// substituting a value.
    #[error("kernel derivative undefined on the diagonal: {0}")]
    DiagonalUndefined(String),

    /// A Gram or operator matrix had an eigenvalue below the clamp
    /// threshold, signalling an invalid kernel rather than rounding noise.
    #[error("matrix is not positive semidefinite: min eigenvalue {min_eig:.3e} < -{tol:.3e}")]
    NotPositiveSemidefinite { min_eig: f64, tol: f64 },

    /// A state coordinate left the finite range (integrator blow-up).
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A tangent-norm input failed the zero-mass compatibility condition.
    #[error("tangent vector violates mass conservation: |∫ξ| = {0:.3e}")]
    MassDefect(f64),

    /// A projection Gram matrix was too ill-conditioned even after basis
    /// truncation.
    #[error("projection basis ill-conditioned: condition number {0:.3e}")]
    IllConditioned(f64),

    /// An iteration failed to reach its convergence threshold in budget.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// A requested operation is not available for the given inputs.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid parameter value or malformed configuration.
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialisation error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) | Error::Serde(_) => 2,
            Error::NoConvergence(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Io(_) => 5,
            Error::DiagonalUndefined(_) => 6,
            Error::NotPositiveSemidefinite { .. } => 7,
            Error::MassDefect(_) | Error::IllConditioned(_) | Error::Unsupported(_) => 8,
        }
    }

    /// Short machine-readable class name used in error JSON.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DiagonalUndefined(_) => "DiagonalUndefined",
            Error::NotPositiveSemidefinite { .. } => "NotPositiveSemidefinite",
            Error::NonFinite(_) => "NonFinite",
            Error::MassDefect(_) => "MassDefect",
            Error::IllConditioned(_) => "IllConditioned",
            Error::NoConvergence(_) => "NoConvergence",
            Error::Unsupported(_) => "Unsupported",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::Io(_) => "IoError",
            Error::Serde(_) => "ConfigInvalid",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
