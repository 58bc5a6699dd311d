use thiserror::Error;

/// Errors surfaced by the terrain, pose, stability, and planning layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("degenerate elevation cloud: {0}")]
    DegenerateCloud(String),

    #[error("polynomial order {order} too low; boundary conditions need order >= 5")]
    InsufficientOrder { order: usize },

    #[error("pose solver did not converge within {iterations} iterations (residual {residual:.3e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("singular Jacobian: Levenberg-Marquardt damping exhausted")]
    SingularJacobian,

    #[error("singular Hessian in implicit differentiation (cond {cond:.3e})")]
    SingularHessian { cond: f64 },

    #[error("degenerate support polygon (area {area:.3e} m^2)")]
    DegenerateSupportPolygon { area: f64 },

    #[error("projected force vanishes on axis {axis}: force parallel to tip-over axis")]
    ZeroProjectedForce { axis: usize },

    #[error("endpoint ({x}, {y}) violates the box bounds")]
    InfeasibleBox { x: f64, y: f64 },

    #[error("projection QP infeasible: {0}")]
    ProjectionInfeasible(String),

    #[error("inner pose solver failed at timestep {step}: {source}")]
    InnerSolverFailure {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
