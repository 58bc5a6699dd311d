//! Terrain-aware trajectory optimization for wheeled vehicles.
//!
//! The pipeline has four stages:
//!
//! 1. [`terrain`] fits a smooth Fourier height field `f(x, y)` to scattered
//!    elevation points, with analytic partial derivatives.
//! 2. [`kinematics`] predicts the vehicle's full 6-DoF pose on that surface by
//!    solving a loop-closure nonlinear least squares problem, and
//!    differentiates through the solver via the implicit function theorem.
//! 3. [`stability`] evaluates the force-angle tip-over measure and turns it
//!    into a differentiable cost.
//! 4. [`planner`] deforms a polynomial trajectory by projected gradient
//!    descent over the bi-level objective, with [`cem`] as a sampling-based
//!    baseline.
//!
//! [`oracle`] holds independent closed-form and brute-force validators used by
//! the test suites; it deliberately shares no numerics with the modules it
//! checks.

pub mod cem;
pub mod dual;
pub mod error;
pub mod kinematics;
pub mod oracle;
pub mod planner;
pub mod qp;
pub mod stability;
pub mod terrain;
pub mod trajectory;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
