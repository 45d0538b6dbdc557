//! Error type shared by all unmixing operations.

use std::fmt;

/// Errors produced by the unmixing toolkit.
#[derive(Debug)]
pub enum UnmixError {
    /// An argument violated a documented precondition (bad counts, ranges, options).
    InvalidInput(String),
    /// Two cooperating arrays disagreed on their dimensions.
    DimensionMismatch(String),
    /// The data does not carry the rank the algorithm needs (e.g. all pixels identical).
    RankDeficient(String),
    /// Projective normalization hit a pixel whose projection is orthogonal to the
    /// mean direction.
    NormalizationFailure { pixel: usize },
    /// A spectral angle was requested for a zero-norm vector.
    ZeroNorm(String),
    /// Synthetic endmember generation could not reach the required pairwise
    /// separation within the retry budget.
    SeparationFailure { attempts: usize },
    /// No depth padding satisfies the strided-convolution shape equation.
    UnsatisfiableShape(String),
    /// Underlying file I/O failure.
    Io(std::io::Error),
    /// A container file violated its format (bad magic, truncated payload,
    /// dimension overflow, malformed header).
    Format(String),
}

impl fmt::Display for UnmixError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnmixError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            UnmixError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            UnmixError::RankDeficient(msg) => write!(f, "rank-deficient data: {msg}"),
            UnmixError::NormalizationFailure { pixel } => write!(
                f,
                "projective normalization failed: pixel {pixel} is orthogonal to the mean direction"
            ),
            UnmixError::ZeroNorm(msg) => write!(f, "zero-norm vector: {msg}"),
            UnmixError::SeparationFailure { attempts } => write!(
                f,
                "could not generate endmembers with the required separation after {attempts} attempts"
            ),
            UnmixError::UnsatisfiableShape(msg) => write!(f, "unsatisfiable shape equation: {msg}"),
            UnmixError::Io(err) => write!(f, "i/o error: {err}"),
            UnmixError::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for UnmixError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            UnmixError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for UnmixError {
    fn from(err: std::io::Error) -> Self {
        UnmixError::Io(err)
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, UnmixError>;
