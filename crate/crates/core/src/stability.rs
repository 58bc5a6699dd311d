//! Force-angle tip-over stability measure and its differentiable cost.
//!
//! The four wheel contacts form a support polygon whose edges are the
//! candidate tip-over axes. For each axis the net force and the COM-to-axis
//! normal are projected into the plane orthogonal to the axis; the signed
//! angle between them is the stability margin for that axis. The vehicle is
//! stable iff every angle is positive. The scalar cost combines a hinge on
//! the per-axis margin with a quadratic penalty on margin differences
//! between consecutive axes.
//!
//! Contacts 1..4 traverse the polygon counterclockwise viewed from +z (the
//! ordering induced by the chassis sign tables), so the angle sign is
//! positive when `(pi_hat x nu_hat) . e_hat > 0`.

use serde::{Deserialize, Serialize};

use crate::dual::{vec3, Dual, Scalar};
use crate::kinematics::{ImplicitJacobian, PoseSolution, YawState};
use crate::{Error, Result};

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.81;

/// Stability cost parameters and the total force on the vehicle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StabilityConfig {
    /// Margin added inside the hinge term, radians.
    pub epsilon: f64,
    /// Weight of the angle-difference cost.
    pub w_theta: f64,
    /// Total force on the vehicle, Newtons.
    pub force: [f64; 3],
}

impl StabilityConfig {
    /// Quasi-static gravity-only force for a vehicle of the given mass.
    pub fn gravity_only(mass: f64) -> Self {
        Self {
            epsilon: 0.05,
            w_theta: 0.05,
            force: [0.0, 0.0, -mass * GRAVITY],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || self.w_theta < 0.0 {
            return Err(Error::InvalidParameter(
                "need epsilon > 0 and w_theta >= 0".to_string(),
            ));
        }
        if vec3::norm(self.force) <= 0.0 {
            return Err(Error::InvalidParameter("zero total force".to_string()));
        }
        Ok(())
    }
}

/// Full per-axis stability diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Tip-over axes `e_i` (polygon edges).
    pub axes: [[f64; 3]; 4],
    /// Projected COM-to-axis normals `pi_i`.
    pub normals: [[f64; 3]; 4],
    /// Projected force components `nu_i`.
    pub force_components: [[f64; 3]; 4],
    /// Signed tip-over angles `theta_i`, radians.
    pub angles: [f64; 4],
    pub signs: [f64; 4],
    /// Total stability cost `c_s`.
    pub cost: f64,
    /// `min_i theta_i`: the worst-case tip-over angle.
    pub min_angle: f64,
}

fn polygon_area(contacts: &[[f64; 3]; 4]) -> f64 {
    let c = contacts[0];
    let mut acc = [0.0; 3];
    for i in 1..3 {
        let a = vec3::sub(contacts[i], c);
        let b = vec3::sub(contacts[i + 1], c);
        acc = vec3::add(acc, vec3::cross(a, b));
    }
    0.5 * vec3::norm(acc)
}

/// Signed tip-over angles for generic scalars; shared by the report and the
/// dual-number gradient path.
fn angles_generic<T: Scalar>(
    contacts: &[[T; 3]; 4],
    com: [T; 3],
    force: [T; 3],
) -> Result<[T; 4]> {
    let mut thetas = [T::zero(); 4];
    for i in 0..4 {
        let next = (i + 1) % 4;
        let e = vec3::sub(contacts[next], contacts[i]);
        let e_hat = vec3::normalize(e);
        let project = |v: [T; 3]| -> [T; 3] {
            let along = vec3::dot(v, e_hat);
            vec3::sub(v, vec3::scale(e_hat, along))
        };
        let pi = project(vec3::sub(contacts[next], com));
        let nu = project(force);
        let nu_norm = vec3::norm(nu);
        if nu_norm.re() < 1e-12 {
            return Err(Error::ZeroProjectedForce { axis: i + 1 });
        }
        let pi_norm = vec3::norm(pi);
        if pi_norm.re() < 1e-12 {
            // COM directly on the axis line: critical boundary
            thetas[i] = T::zero();
            continue;
        }
        let pi_hat = vec3::scale(pi, T::one() / pi_norm);
        let nu_hat = vec3::scale(nu, T::one() / nu_norm);
        let angle = vec3::dot(nu_hat, pi_hat).acos_clamped();
        let orientation = vec3::dot(vec3::cross(pi_hat, nu_hat), e_hat);
        let sign = if orientation.re() > 0.0 {
            T::one()
        } else {
            -T::one()
        };
        thetas[i] = sign * angle;
    }
    Ok(thetas)
}

fn cost_from_angles<T: Scalar>(thetas: &[T; 4], epsilon: f64, w_theta: f64) -> T {
    let mut cost = T::zero();
    for i in 0..4 {
        let next = (i + 1) % 4;
        let hinge = (-thetas[i] + T::from_f64(epsilon)).max_zero();
        let diff = thetas[i] - thetas[next];
        cost = cost + hinge + T::from_f64(w_theta) * diff * diff;
    }
    cost
}

/// Force-angle stability report for a converged pose.
pub fn stability_report(
    pose: &PoseSolution,
    com: [f64; 3],
    config: &StabilityConfig,
) -> Result<StabilityReport> {
    config.validate()?;
    if !pose.converged {
        return Err(Error::InvalidParameter(
            "stability_report requires a converged pose".to_string(),
        ));
    }
    let area = polygon_area(&pose.contacts);
    if area <= 1e-6 {
        return Err(Error::DegenerateSupportPolygon { area });
    }

    let thetas = angles_generic(&pose.contacts, com, config.force)?;
    let cost = cost_from_angles(&thetas, config.epsilon, config.w_theta);

    let mut axes = [[0.0; 3]; 4];
    let mut normals = [[0.0; 3]; 4];
    let mut force_components = [[0.0; 3]; 4];
    let mut signs = [0.0; 4];
    for i in 0..4 {
        let next = (i + 1) % 4;
        let e = vec3::sub(pose.contacts[next], pose.contacts[i]);
        axes[i] = e;
        let e_hat = vec3::normalize(e);
        let project = |v: [f64; 3]| vec3::sub(v, vec3::scale(e_hat, vec3::dot(v, e_hat)));
        normals[i] = project(vec3::sub(pose.contacts[next], com));
        force_components[i] = project(config.force);
        signs[i] = if thetas[i] >= 0.0 { 1.0 } else { -1.0 };
    }
    let min_angle = thetas.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(StabilityReport {
        axes,
        normals,
        force_components,
        angles: thetas,
        signs,
        cost,
        min_angle,
    })
}

/// Total derivative of the stability cost w.r.t. the yaw-plane state,
/// `(dc_s/dx, dc_s/dy, dc_s/dalpha)`.
///
/// The COM is taken as `(x, y, z(u))`, so the gradient combines the direct
/// dependence on `(x, y)` with the implicit chain `dc_s/du . Du*/dx`. All
/// partials of the cost are computed by forward-mode dual numbers through
/// the angle formulas; the hinge uses subgradient 0 at its kink.
pub fn stability_cost_gradient(
    state: &YawState,
    pose: &PoseSolution,
    jac: &ImplicitJacobian,
    config: &StabilityConfig,
) -> Result<[f64; 3]> {
    config.validate()?;
    if !pose.converged {
        return Err(Error::InvalidParameter(
            "stability_cost_gradient requires a converged pose".to_string(),
        ));
    }

    let u = pose.as_vector();
    type D = Dual<f64>;
    let eval = |seed_u: Option<usize>, seed_xy: Option<usize>| -> Result<D> {
        let ud: [D; 15] = std::array::from_fn(|k| {
            if seed_u == Some(k) {
                Dual::variable(u[k])
            } else {
                Dual::constant(u[k])
            }
        });
        let contacts: [[D; 3]; 4] =
            std::array::from_fn(|i| std::array::from_fn(|k| ud[3 + 3 * i + k]));
        let sx = if seed_xy == Some(0) {
            Dual::variable(state.x)
        } else {
            Dual::constant(state.x)
        };
        let sy = if seed_xy == Some(1) {
            Dual::variable(state.y)
        } else {
            Dual::constant(state.y)
        };
        let com = [sx, sy, ud[0]];
        let force = vec3::lift(config.force);
        let thetas = angles_generic(&contacts, com, force)?;
        Ok(cost_from_angles(&thetas, config.epsilon, config.w_theta))
    };

    let mut dc_du = [0.0; 15];
    for (a, slot) in dc_du.iter_mut().enumerate() {
        *slot = eval(Some(a), None)?.du;
    }
    let direct_x = eval(None, Some(0))?.du;
    let direct_y = eval(None, Some(1))?.du;

    let mut grad = [direct_x, direct_y, 0.0];
    for c in 0..3 {
        let mut acc = 0.0;
        for (r, d) in dc_du.iter().enumerate() {
            acc += d * jac.matrix[(r, c)];
        }
        grad[c] += acc;
    }
    Ok(grad)
}
