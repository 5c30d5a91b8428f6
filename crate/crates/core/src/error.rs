use std::io;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rank {rank} out of range 1..={max}")]
    Rank { rank: usize, max: usize },
    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("infeasible sampling mask: {0}")]
    Mask(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical breakdown: {0}")]
    Numerical(String),
    #[error("optimisation diverged: {0}")]
    Diverged(String),
    /// A latent optimisation hit a non-finite loss; `best` holds the
    /// lowest-loss latents seen before the breakdown.
    #[error("inversion broke down: {message}")]
    Breakdown {
        message: String,
        best: Box<crate::generator::LatentSet>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures that come from the arithmetic rather than from bad
    /// inputs. The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Diverged(_) | Error::Breakdown { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
