use thiserror::Error;

use crate::pnp::WeightedSolution;

/// Errors produced anywhere in the LC pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A point sits on or behind the camera plane.
    #[error("point has non-positive depth {depth:.3e} (must exceed {eps:.0e})")]
    NonPositiveDepth { depth: f64, eps: f64 },

    #[error("rotation angle {angle:.9} is too close to pi for a unique logarithm")]
    NearPiRotation { angle: f64 },

    #[error("pose representation {0} requires bounding-box corners")]
    MissingBBox(&'static str),

    #[error("need at least {required} correspondences, got {actual}")]
    InsufficientCorrespondences { required: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The normal equations of the weighted solver could not be solved.
    #[error("solver normal equations are singular")]
    SingularHessian,

    /// The solver ran out of iterations; the best iterate is attached.
    #[error("solver did not converge within {} iterations", .best.iters)]
    MaxItersExceeded { best: Box<WeightedSolution> },

    #[error("no RANSAC hypothesis reached {min_inliers} inliers")]
    NoConsensus { min_inliers: usize },

    /// NLL Hessian at the linearization point is singular or too badly conditioned.
    #[error("NLL Hessian is degenerate (condition number {condition:.3e})")]
    DegenerateHessian { condition: f64 },

    #[error("covariance has a negative eigenvalue {0:.3e} beyond roundoff")]
    NotPositiveSemidefinite(f64),

    #[error("prior term must be positive, got {0}")]
    NonPositivePrior(f64),

    #[error("loss gradient contains non-finite values")]
    NonFiniteGradient,

    #[error("value {value} outside codec range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("could not place the object inside the camera frustum after {0} attempts")]
    FrustumFailure(usize),

    #[error("all residuals are zero; gradient correctness is undefined")]
    AllResidualsZero,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
