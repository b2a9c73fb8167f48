use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// Dot product fed to the kernel lies outside [-1, 1].
    #[error("kernel argument z = {0} lies outside [-1, 1]")]
    Domain(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch for `{what}`: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("input row {row} is not unit norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("symmetric tridiagonal eigen solve did not converge (order {order})")]
    EigenSolve { order: usize },

    /// Quadrature or truncation too coarse to resolve the kernel.
    #[error(
        "spectral resolution insufficient: resolved trace {resolved} vs kernel trace {expected} \
         ({detail}); increase the quadrature order or k_max"
    )]
    SpectralResolution {
        resolved: f64,
        expected: f64,
        detail: String,
    },

    /// Sample size at or beyond the number of available modes.
    #[error(
        "mode deficit: N = {n} but only {modes} modes with positive eigenvalue are available; \
         add spectral levels or reduce N"
    )]
    ModeDeficit { n: f64, modes: f64 },

    #[error("Gram matrix of {size} points is not positive definite even with jitter {jitter:e}")]
    Conditioning { size: usize, jitter: f64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed spectrum data: {0}")]
    SpectrumFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::Config(_)
                | Error::SpectrumFormat(_)
                | Error::Unsupported(_)
                | Error::DimensionMismatch { .. }
                | Error::LengthMismatch { .. }
                | Error::ModeDeficit { .. }
        )
    }
}
