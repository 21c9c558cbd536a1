use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid lattice dimensions {width}x{height}")]
    InvalidLattice { width: usize, height: usize },

    #[error("pixel index {index} is outside the {width}x{height} lattice")]
    PixelOutOfRange {
        index: usize,
        width: usize,
        height: usize,
    },

    #[error("label entry {entry} (pixel {pixel}, class {class}): {reason}")]
    InvalidLabel {
        entry: usize,
        pixel: usize,
        class: usize,
        reason: &'static str,
    },

    #[error("no absorbing pixels")]
    NoAbsorbingPixels,

    #[error("invalid boundary value {value} at pixel {pixel}")]
    InvalidBoundary { pixel: usize, value: f64 },

    #[error("pixel {pixel} is not a probability distribution: {reason}")]
    NotSimplex { pixel: usize, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("solver did not converge after {sweeps} sweeps (relative residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("negative partition value {value:e} at pixel {pixel}, class {class}")]
    NegativePartition { pixel: usize, class: usize, value: f64 },

    #[error("non-finite gradient at pixel {pixel}")]
    NonFiniteGradient { pixel: usize },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NegativePartition { .. }
                | Error::NonFiniteGradient { .. }
        )
    }
}
