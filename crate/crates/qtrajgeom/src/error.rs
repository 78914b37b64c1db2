use thiserror::Error;

/// Errors shared across the trajectory, action and solver layers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum QtError {
    #[error("degenerate state: both spinor components below 1e-14")]
    DegenerateState,

    #[error("invalid null-measurement strength: 4 c dt / T = {0} > 1")]
    InvalidStrength(f64),

    #[error("coordinate singularity at theta = {0}")]
    SingularCoordinate(f64),

    #[error("functional measure diverges: sin(phi - Phi) = {0}")]
    SingularMeasure(f64),

    #[error("shooting failed to converge after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("singular shooting Jacobian")]
    SingularJacobian,

    #[error("continuation lost the branch at parameter {0}")]
    BranchLost(f64),

    #[error("no sign change of the branch-action difference in the scan window")]
    NoBracket,

    #[error("empty post-selection bin: {0}")]
    EmptyBin(&'static str),

    #[error("winding number did not flip over the scan window")]
    NoFlip,

    #[error("chern evaluations disagree: curvature {curvature:.4} vs boundary {boundary:.4}")]
    GridTooCoarse { curvature: f64, boundary: f64 },

    #[error("chi step is not quantized: |dchi|/pi = {0}")]
    NonQuantized(f64),

    #[error("trajectory endpoints are antipodal; geodesic closure undefined")]
    AntipodalEndpoints,

    #[error("time reparameterization clock is degenerate")]
    DegenerateClock,

    #[error("conjugate point inside (0, u_T): f({0}) = 0")]
    ConjugatePoint(f64),

    #[error("eigenvalue-product ratio not converged: N vs N/2 differ by {0:.3}%")]
    NotConverged(f64),
}

pub type Result<T> = std::result::Result<T, QtError>;
