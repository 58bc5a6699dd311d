//! Wheel-terrain kinematics: loop-closure residuals, the nonlinear
//! least-squares pose solver, and implicit differentiation of its optimum.
//!
//! The vehicle plus terrain is treated as a closed kinematic chain: each
//! wheel contact can be reached either directly (terrain surface) or through
//! the chassis (vehicle center plus a rotated corner offset). Equating the
//! two paths for all four wheels gives 12 loop-closure equations; requiring
//! each contact to lie on the height field adds 4 more, for 16 residuals in
//! 15 unknowns `u = (z, beta, gamma, contacts)`. The pose is the
//! least-squares minimizer of the stacked residuals, and the Jacobian of
//! that minimizer w.r.t. the yaw-plane state `(x, y, alpha)` follows from
//! the implicit function theorem applied to the first-order optimality
//! condition: `Du* = -H^{-1} B`.
//!
//! Euler convention: `R = Rz(alpha) * Ry(gamma) * Rx(beta)` (yaw, pitch,
//! roll composed in the world frame).

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::terrain::TerrainModel;
use crate::{Error, Result};

/// Number of pose unknowns: `z, beta, gamma` plus four contact triples.
pub const N_UNKNOWNS: usize = 15;
/// Number of stacked residuals: 12 loop-closure plus 4 terrain equations.
pub const N_RESIDUALS: usize = 16;

pub type PoseVector = SVector<f64, N_UNKNOWNS>;
pub type ResidualVector = SVector<f64, N_RESIDUALS>;

/// Chassis geometry. Wheel `i` sits at body-frame offset
/// `(delta_i * h, r_i * w, -l_i)` with `delta = (+1, -1, -1, +1)` and
/// `r = (+1, +1, -1, -1)`, i.e. the contacts 1..4 traverse the support
/// polygon front-left, rear-left, rear-right, front-right.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleGeometry {
    /// Half-breadth `h` (forward) in meters.
    #[serde(rename = "h")]
    pub half_breadth: f64,
    /// Half-width `w` (lateral) in meters.
    #[serde(rename = "w")]
    pub half_width: f64,
    /// Equivalent leg lengths including wheel radius, meters.
    #[serde(rename = "legs")]
    pub leg_lengths: [f64; 4],
    /// Vehicle mass in kg (used by the stability cost).
    pub mass: f64,
}

impl Default for VehicleGeometry {
    /// Husky-class chassis.
    fn default() -> Self {
        Self {
            half_breadth: 0.28,
            half_width: 0.33,
            leg_lengths: [0.165; 4],
            mass: 50.0,
        }
    }
}

impl VehicleGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.half_breadth <= 0.0
            || self.half_width <= 0.0
            || self.leg_lengths.iter().any(|l| *l <= 0.0)
        {
            return Err(Error::InvalidParameter(
                "vehicle dimensions must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn delta(i: usize) -> f64 {
        match i {
            0 | 3 => 1.0,
            _ => -1.0,
        }
    }

    pub fn r(i: usize) -> f64 {
        let v = 2.5 - (i + 1) as f64;
        v / v.abs()
    }

    /// Body-frame offset of wheel contact `i` (0-based).
    pub fn wheel_offset(&self, i: usize) -> [f64; 3] {
        [
            Self::delta(i) * self.half_breadth,
            Self::r(i) * self.half_width,
            -self.leg_lengths[i],
        ]
    }
}

/// Directly controllable configuration `(x, y, alpha)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct YawState {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
}

impl YawState {
    pub fn new(x: f64, y: f64, alpha: f64) -> Self {
        Self { x, y, alpha }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.alpha.is_finite()
    }
}

/// Optimal pose `u*` with solver diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseSolution {
    pub z: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Wheel-ground contact points, world frame.
    pub contacts: [[f64; 3]; 4],
    /// `||g||_2` at the optimum; large values signal that four-wheel
    /// contact is infeasible on this patch.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseSolution {
    pub fn as_vector(&self) -> PoseVector {
        let mut u = PoseVector::zeros();
        u[0] = self.z;
        u[1] = self.beta;
        u[2] = self.gamma;
        for i in 0..4 {
            for k in 0..3 {
                u[3 + 3 * i + k] = self.contacts[i][k];
            }
        }
        u
    }

    pub fn from_vector(u: &PoseVector, residual_norm: f64, iterations: usize, converged: bool) -> Self {
        let mut contacts = [[0.0; 3]; 4];
        for (i, c) in contacts.iter_mut().enumerate() {
            for (k, v) in c.iter_mut().enumerate() {
                *v = u[3 + 3 * i + k];
            }
        }
        Self {
            z: u[0],
            beta: u[1],
            gamma: u[2],
            contacts,
            residual_norm,
            iterations,
            converged,
        }
    }
}

/// `Du*/dx = -H^{-1} B`: sensitivity of the optimal pose to `(x, y, alpha)`.
#[derive(Clone, Debug)]
pub struct ImplicitJacobian {
    /// 15x3 matrix, rows ordered as the pose vector.
    pub matrix: SMatrix<f64, N_UNKNOWNS, 3>,
    /// Condition number of `H`.
    pub conditioning: f64,
}

/// How `H` and `B` are assembled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImplicitMode {
    /// `H = 2 J_u^T J_u`, `B = 2 J_u^T J_x`; exact up to `O(||g||)` at a
    /// converged optimum.
    #[default]
    GaussNewton,
    /// Full second derivatives via nested dual numbers.
    ExactHessian,
}

/// Levenberg-Marquardt settings for [`solve_pose`].
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub lambda0: f64,
    pub lambda_factor: f64,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Plain Gauss-Newton (no damping adaptation).
    pub gauss_newton: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_factor: 10.0,
            max_iterations: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            gauss_newton: false,
        }
    }
}

/// `R = Rz(alpha) Ry(gamma) Rx(beta)`, rows-of-arrays layout.
pub fn rotation_matrix<T: Scalar>(alpha: T, beta: T, gamma: T) -> [[T; 3]; 3] {
    let (sa, ca) = (alpha.sin(), alpha.cos());
    let (sb, cb) = (beta.sin(), beta.cos());
    let (sg, cg) = (gamma.sin(), gamma.cos());
    [
        [ca * cg, ca * sg * sb - sa * cb, ca * sg * cb + sa * sb],
        [sa * cg, sa * sg * sb + ca * cb, sa * sg * cb - ca * sb],
        [-sg, cg * sb, cg * cb],
    ]
}

fn mat_vec<T: Scalar>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Stacked residuals, generic over the scalar type so dual numbers can flow
/// through for exact derivatives.
pub fn residuals_generic<T: Scalar>(
    state: [T; 3],
    u: &[T; N_UNKNOWNS],
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
) -> [T; N_RESIDUALS] {
    let rot = rotation_matrix(state[2], u[1], u[2]);
    let mut g = [T::zero(); N_RESIDUALS];
    for i in 0..4 {
        let d = geom.wheel_offset(i);
        let offset = mat_vec(&rot, [T::from_f64(d[0]), T::from_f64(d[1]), T::from_f64(d[2])]);
        let cx = u[3 + 3 * i];
        let cy = u[4 + 3 * i];
        let cz = u[5 + 3 * i];
        g[3 * i] = state[0] + offset[0] - cx;
        g[3 * i + 1] = state[1] + offset[1] - cy;
        g[3 * i + 2] = u[0] + offset[2] - cz;
        g[12 + i] = cz - terrain.height_generic(cx, cy);
    }
    g
}

/// The 16 stacked loop-closure and terrain residuals at `(state, u)`.
pub fn loop_closure_residuals(
    state: &YawState,
    u: &PoseVector,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
) -> Result<ResidualVector> {
    if !state.is_finite() || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loop closure input"));
    }
    let mut ua = [0.0; N_UNKNOWNS];
    ua.copy_from_slice(u.as_slice());
    let g = residuals_generic([state.x, state.y, state.alpha], &ua, geom, terrain);
    Ok(ResidualVector::from_column_slice(&g))
}

/// Analytic Jacobians of the residual stack w.r.t. the pose unknowns and the
/// yaw-plane state. Validated against dual-number differentiation in tests.
fn residual_jacobians(
    state: &YawState,
    u: &PoseVector,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
) -> (
    SMatrix<f64, N_RESIDUALS, N_UNKNOWNS>,
    SMatrix<f64, N_RESIDUALS, 3>,
) {
    let (sa, ca) = (state.alpha.sin(), state.alpha.cos());
    let (sb, cb) = (u[1].sin(), u[1].cos());
    let (sg, cg) = (u[2].sin(), u[2].cos());

    // dR/dbeta, dR/dgamma, dR/dalpha
    let dr_db = [
        [0.0, ca * sg * cb + sa * sb, -ca * sg * sb + sa * cb],
        [0.0, sa * sg * cb - ca * sb, -sa * sg * sb - ca * cb],
        [0.0, cg * cb, -cg * sb],
    ];
    let dr_dg = [
        [-ca * sg, ca * cg * sb, ca * cg * cb],
        [-sa * sg, sa * cg * sb, sa * cg * cb],
        [-cg, -sg * sb, -sg * cb],
    ];
    let dr_da = [
        [-sa * cg, -sa * sg * sb - ca * cb, -sa * sg * cb + ca * sb],
        [ca * cg, ca * sg * sb - sa * cb, ca * sg * cb + sa * sb],
        [0.0, 0.0, 0.0],
    ];

    let mut ju = SMatrix::<f64, N_RESIDUALS, N_UNKNOWNS>::zeros();
    let mut jx = SMatrix::<f64, N_RESIDUALS, 3>::zeros();

    for i in 0..4 {
        let d = geom.wheel_offset(i);
        let db = mat_vec(&dr_db, d);
        let dg = mat_vec(&dr_dg, d);
        let da = mat_vec(&dr_da, d);
        for k in 0..3 {
            let row = 3 * i + k;
            ju[(row, 1)] = db[k];
            ju[(row, 2)] = dg[k];
            ju[(row, 3 + 3 * i + k)] = -1.0;
            jx[(row, 2)] = da[k];
        }
        ju[(3 * i + 2, 0)] = 1.0;
        jx[(3 * i, 0)] = 1.0;
        jx[(3 * i + 1, 1)] = 1.0;

        let grad = terrain.gradient_unchecked(u[3 + 3 * i], u[4 + 3 * i]);
        ju[(12 + i, 3 + 3 * i)] = -grad[0];
        ju[(12 + i, 4 + 3 * i)] = -grad[1];
        ju[(12 + i, 5 + 3 * i)] = 1.0;
    }
    (ju, jx)
}

/// Default initialization: yaw-only contact guesses snapped to the terrain,
/// chassis height from the mean contact height plus the mean leg length.
fn default_init(state: &YawState, geom: &VehicleGeometry, terrain: &TerrainModel) -> PoseVector {
    let rot = rotation_matrix(state.alpha, 0.0, 0.0);
    let mut u = PoseVector::zeros();
    let mut z_sum = 0.0;
    for i in 0..4 {
        let offset = mat_vec(&rot, geom.wheel_offset(i));
        let cx = state.x + offset[0];
        let cy = state.y + offset[1];
        let cz = terrain.height_generic(cx, cy);
        u[3 + 3 * i] = cx;
        u[4 + 3 * i] = cy;
        u[5 + 3 * i] = cz;
        z_sum += cz;
    }
    let mean_leg = geom.leg_lengths.iter().sum::<f64>() / 4.0;
    u[0] = z_sum / 4.0 + mean_leg;
    u
}

/// Solve the pose NLS with Levenberg-Marquardt and default settings.
pub fn solve_pose(
    state: &YawState,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
    warm_start: Option<&PoseSolution>,
) -> Result<PoseSolution> {
    solve_pose_with(state, geom, terrain, warm_start, &SolverConfig::default())
}

pub fn solve_pose_with(
    state: &YawState,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
    warm_start: Option<&PoseSolution>,
    config: &SolverConfig,
) -> Result<PoseSolution> {
    if !state.is_finite() {
        return Err(Error::NonFinite("yaw state"));
    }
    geom.validate()?;

    let mut u = warm_start
        .map(|w| w.as_vector())
        .unwrap_or_else(|| default_init(state, geom, terrain));

    let eval = |u: &PoseVector| -> ResidualVector {
        let mut ua = [0.0; N_UNKNOWNS];
        ua.copy_from_slice(u.as_slice());
        let g = residuals_generic([state.x, state.y, state.alpha], &ua, geom, terrain);
        ResidualVector::from_column_slice(&g)
    };

    let mut g = eval(&u);
    let mut cost = g.norm_squared();
    let mut lambda = if config.gauss_newton { 0.0 } else { config.lambda0 };
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let (ju, _) = residual_jacobians(state, &u, geom, terrain);
        let grad = 2.0 * ju.transpose() * g;
        if grad.norm() <= config.gradient_tol {
            converged = true;
            iterations = iter;
            break;
        }
        let jtj = ju.transpose() * ju;
        let rhs = -(ju.transpose() * g);

        let mut stepped = false;
        loop {
            let mut a = jtj;
            if lambda > 0.0 {
                for i in 0..N_UNKNOWNS {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
                }
            }
            let Some(chol) = a.cholesky() else {
                lambda = (lambda.max(1e-12)) * config.lambda_factor;
                if lambda > 1e12 {
                    return Err(Error::SingularJacobian);
                }
                continue;
            };
            let step = chol.solve(&rhs);
            let candidate = u + step;
            let g_new = eval(&candidate);
            let cost_new = g_new.norm_squared();
            if cost_new <= cost || config.gauss_newton {
                u = candidate;
                g = g_new;
                cost = cost_new;
                if !config.gauss_newton {
                    lambda = (lambda / config.lambda_factor).max(1e-14);
                }
                stepped = true;
                if step.norm() <= config.step_tol {
                    converged = true;
                }
                break;
            }
            lambda *= config.lambda_factor;
            if lambda > 1e12 {
                // no descent direction left; treat current point as stalled
                break;
            }
        }
        if converged || !stepped {
            if !stepped {
                // re-check optimality before declaring failure
                let (ju, _) = residual_jacobians(state, &u, geom, terrain);
                let grad = 2.0 * ju.transpose() * g;
                converged = grad.norm() <= config.gradient_tol * 1e2;
            }
            break;
        }
    }

    if !converged {
        return Err(Error::SolverDiverged {
            iterations,
            residual: cost.sqrt(),
        });
    }
    if u[1].abs() >= std::f64::consts::FRAC_PI_2 || u[2].abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::SolverDiverged {
            iterations,
            residual: cost.sqrt(),
        });
    }
    Ok(PoseSolution::from_vector(&u, cost.sqrt(), iterations, true))
}

/// Solve poses along a sequence of states, warm-start chaining each solve
/// from the previous solution. Inherently sequential; for independent
/// (parallelizable) solves call [`solve_pose`] with `warm_start = None`.
pub fn solve_pose_chain(
    states: &[YawState],
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
) -> Result<Vec<PoseSolution>> {
    let mut out = Vec::with_capacity(states.len());
    let mut prev: Option<PoseSolution> = None;
    for (step, state) in states.iter().enumerate() {
        let solved = solve_pose(state, geom, terrain, prev.as_ref()).or_else(|_| {
            // retry once from the default initialization
            solve_pose(state, geom, terrain, None)
        });
        match solved {
            Ok(sol) => {
                prev = Some(sol.clone());
                out.push(sol);
            }
            Err(e) => {
                return Err(Error::InnerSolverFailure {
                    step,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

/// Implicit Jacobian with the default Gauss-Newton curvature model.
pub fn implicit_jacobian(
    state: &YawState,
    solution: &PoseSolution,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
) -> Result<ImplicitJacobian> {
    implicit_jacobian_with(state, solution, geom, terrain, ImplicitMode::GaussNewton)
}

pub fn implicit_jacobian_with(
    state: &YawState,
    solution: &PoseSolution,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
    mode: ImplicitMode,
) -> Result<ImplicitJacobian> {
    if !solution.converged {
        return Err(Error::InvalidParameter(
            "implicit_jacobian requires a converged pose".to_string(),
        ));
    }
    let u = solution.as_vector();
    let (ju, jx) = residual_jacobians(state, &u, geom, terrain);
    let mut h = 2.0 * ju.transpose() * ju;
    let mut b = 2.0 * ju.transpose() * jx;

    if mode == ImplicitMode::ExactHessian {
        let g = loop_closure_residuals(state, &u, geom, terrain)?;
        add_residual_curvature(state, &u, geom, terrain, &g, &mut h, &mut b);
    }

    let svd = h.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::SingularHessian { cond });
    }
    let chol = h.cholesky().ok_or(Error::SingularHessian { cond })?;
    let matrix = -chol.solve(&b);
    Ok(ImplicitJacobian {
        matrix,
        conditioning: cond,
    })
}

/// Add `2 sum_j g_j * d2 g_j` terms to `H` (over `u,u`) and `B` (over `u,x`)
/// using nested dual numbers.
fn add_residual_curvature(
    state: &YawState,
    u: &PoseVector,
    geom: &VehicleGeometry,
    terrain: &TerrainModel,
    g: &ResidualVector,
    h: &mut SMatrix<f64, N_UNKNOWNS, N_UNKNOWNS>,
    b: &mut SMatrix<f64, N_UNKNOWNS, 3>,
) {
    type DD = Dual<Dual<f64>>;
    let lift_state = |a: usize| -> [DD; 3] {
        let s = [state.x, state.y, state.alpha];
        std::array::from_fn(|k| {
            if k == a {
                DD::new(Dual::variable(s[k]), Dual::constant(0.0))
            } else {
                DD::from_f64(s[k])
            }
        })
    };

    // d2 over (u_a, u_b): outer eps on u_a, inner eps on u_b
    for a in 0..N_UNKNOWNS {
        for bidx in a..N_UNKNOWNS {
            let ua: [DD; N_UNKNOWNS] = std::array::from_fn(|k| {
                let inner = if k == bidx {
                    Dual::variable(u[k])
                } else {
                    Dual::constant(u[k])
                };
                let outer = if k == a {
                    Dual::constant(1.0)
                } else {
                    Dual::constant(0.0)
                };
                DD::new(inner, outer)
            });
            let s: [DD; 3] = [
                DD::from_f64(state.x),
                DD::from_f64(state.y),
                DD::from_f64(state.alpha),
            ];
            let res = residuals_generic(s, &ua, geom, terrain);
            let mut acc = 0.0;
            for (j, r) in res.iter().enumerate() {
                acc += g[j] * r.du.du;
            }
            h[(a, bidx)] += 2.0 * acc;
            if bidx != a {
                h[(bidx, a)] += 2.0 * acc;
            }
        }
    }

    // d2 over (u_a, x_c): inner eps on x_c, outer eps on u_a
    for a in 0..N_UNKNOWNS {
        for c in 0..3 {
            let s = lift_state(c);
            let ua: [DD; N_UNKNOWNS] = std::array::from_fn(|k| {
                let outer = if k == a {
                    Dual::constant(1.0)
                } else {
                    Dual::constant(0.0)
                };
                DD::new(Dual::constant(u[k]), outer)
            });
            let res = residuals_generic(s, &ua, geom, terrain);
            let mut acc = 0.0;
            for (j, r) in res.iter().enumerate() {
                acc += g[j] * r.du.du;
            }
            b[(a, c)] += 2.0 * acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{fit_terrain, fit_terrain_with, synth_terrain, SynthKind, TerrainModel};

    fn flat_model() -> TerrainModel {
        TerrainModel {
            n: 1,
            center: [0.0, 0.0],
            frequencies: vec![[0.0; 4]],
            weights: vec![[0.0; 2]],
            fit_rmse: 0.0,
        }
    }

    fn equal_leg_geom(l: f64) -> VehicleGeometry {
        VehicleGeometry {
            leg_lengths: [l; 4],
            ..VehicleGeometry::default()
        }
    }

    fn incline_model(slope: f64) -> TerrainModel {
        crate::oracle::plane_model(slope, 0.0, 0.0)
    }

    #[test]
    fn sign_tables_match_contract() {
        assert_eq!(
            (0..4).map(VehicleGeometry::delta).collect::<Vec<_>>(),
            vec![1.0, -1.0, -1.0, 1.0]
        );
        assert_eq!(
            (0..4).map(VehicleGeometry::r).collect::<Vec<_>>(),
            vec![1.0, 1.0, -1.0, -1.0]
        );
    }

    #[test]
    fn rotation_is_orthonormal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let r = rotation_matrix(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.4..1.4),
                rng.gen_range(-1.4..1.4),
            );
            let m = nalgebra::Matrix3::from_fn(|i, j| r[i][j]);
            assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_closure_is_exact() {
        let geom = equal_leg_geom(0.3);
        let terrain = flat_model();
        let state = YawState::new(0.0, 0.0, 0.0);
        let mut u = PoseVector::zeros();
        u[0] = 0.3;
        for i in 0..4 {
            let d = geom.wheel_offset(i);
            u[3 + 3 * i] = d[0];
            u[4 + 3 * i] = d[1];
            u[5 + 3 * i] = 0.0;
        }
        let g = loop_closure_residuals(&state, &u, &geom, &terrain).unwrap();
        assert!(g.norm() < 1e-12);

        // pure vertical offset shows up only in the four vertical closure rows
        u[0] = 0.3 + 0.1;
        let g = loop_closure_residuals(&state, &u, &geom, &terrain).unwrap();
        for i in 0..4 {
            assert!((g[3 * i + 2] - 0.1).abs() < 1e-12);
            assert!(g[3 * i].abs() < 1e-12 && g[3 * i + 1].abs() < 1e-12);
            assert!(g[12 + i].abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_jacobians_match_duals() {
        let cloud = synth_terrain(SynthKind::Hills { seed: 8 }, 12.0, 0.4).unwrap();
        let terrain = fit_terrain(&cloud, 40, 0).unwrap();
        let geom = VehicleGeometry::default();
        let state = YawState::new(0.4, -0.3, 0.7);
        let mut u = default_init(&state, &geom, &terrain);
        u[1] = 0.05;
        u[2] = -0.08;

        let (ju, jx) = residual_jacobians(&state, &u, &geom, &terrain);
        let mut ua = [0.0; N_UNKNOWNS];
        ua.copy_from_slice(u.as_slice());
        for col in 0..N_UNKNOWNS {
            let ud: [Dual<f64>; N_UNKNOWNS] = std::array::from_fn(|k| {
                if k == col {
                    Dual::variable(ua[k])
                } else {
                    Dual::constant(ua[k])
                }
            });
            let s = [
                Dual::constant(state.x),
                Dual::constant(state.y),
                Dual::constant(state.alpha),
            ];
            let res = residuals_generic(s, &ud, &geom, &terrain);
            for (row, r) in res.iter().enumerate() {
                assert!(
                    (ju[(row, col)] - r.du).abs() < 1e-10,
                    "Ju mismatch at ({row}, {col})"
                );
            }
        }
        let sv = [state.x, state.y, state.alpha];
        for col in 0..3 {
            let s: [Dual<f64>; 3] = std::array::from_fn(|k| {
                if k == col {
                    Dual::variable(sv[k])
                } else {
                    Dual::constant(sv[k])
                }
            });
            let ud: [Dual<f64>; N_UNKNOWNS] = std::array::from_fn(|k| Dual::constant(ua[k]));
            let res = residuals_generic(s, &ud, &geom, &terrain);
            for (row, r) in res.iter().enumerate() {
                assert!(
                    (jx[(row, col)] - r.du).abs() < 1e-10,
                    "Jx mismatch at ({row}, {col})"
                );
            }
        }
    }

    #[test]
    fn flat_pose_solves_exactly() {
        let geom = equal_leg_geom(0.3);
        let terrain = flat_model();
        for state in [
            YawState::new(0.0, 0.0, 0.0),
            YawState::new(2.0, -1.0, 0.9),
        ] {
            let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
            assert!(sol.converged);
            assert!((sol.z - 0.3).abs() < 1e-8);
            assert!(sol.beta.abs() < 1e-8 && sol.gamma.abs() < 1e-8);
            assert!(sol.residual_norm <= 1e-10);
        }
    }

    #[test]
    fn incline_pose_matches_plane_geometry() {
        let slope = 0.2;
        let terrain = incline_model(slope);
        let geom = equal_leg_geom(0.3);
        let state = YawState::new(0.0, 0.0, 0.0);
        let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
        assert!((sol.gamma + slope.atan()).abs() < 1e-6, "gamma {}", sol.gamma);
        assert!(sol.beta.abs() < 1e-6);
        assert!(sol.residual_norm <= 1e-8);
    }

    #[test]
    fn steep_step_reports_contact_infeasibility() {
        // steep sigmoid-like ridge straddled by the vehicle
        let cloud = {
            let base = synth_terrain(SynthKind::Flat, 10.0, 0.2).unwrap();
            let points = base
                .points
                .iter()
                .map(|p| [p[0], p[1], 0.4 / (1.0 + (-30.0f64 * p[0]).exp())])
                .collect();
            crate::terrain::ElevationCloud::new(points, base.patch_center, base.patch_radius)
                .unwrap()
        };
        let terrain = fit_terrain_with(
            &cloud,
            &crate::terrain::FitOptions {
                n_frequencies: 150,
                omega_max: Some(30.0),
                ..Default::default()
            },
        )
        .unwrap();
        let geom = VehicleGeometry::default();
        // flat-ground reference residual
        let flat_res = solve_pose(&YawState::new(0.0, 0.0, 0.0), &geom, &flat_model(), None)
            .unwrap()
            .residual_norm
            .max(1e-9);
        let straddle = solve_pose(&YawState::new(0.0, 0.0, 0.0), &geom, &terrain, None).unwrap();
        assert!(straddle.residual_norm > 1e-3, "residual {}", straddle.residual_norm);
        assert!(straddle.residual_norm / flat_res >= 1e3);
    }

    #[test]
    fn implicit_jacobian_flat_and_incline() {
        let geom = equal_leg_geom(0.3);
        let terrain = flat_model();
        let state = YawState::new(0.5, 0.2, 0.3);
        let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
        let jac = implicit_jacobian(&state, &sol, &geom, &terrain).unwrap();
        for c in 0..3 {
            for r in 0..3 {
                assert!(jac.matrix[(r, c)].abs() < 1e-8, "flat (z,b,g) block nonzero");
            }
        }

        let terrain = incline_model(0.2);
        let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
        let jac = implicit_jacobian(&state, &sol, &geom, &terrain).unwrap();
        assert!((jac.matrix[(0, 0)] - 0.2).abs() < 1e-6, "dz/dx {}", jac.matrix[(0, 0)]);
        assert!(jac.matrix[(0, 1)].abs() < 1e-6, "dz/dy {}", jac.matrix[(0, 1)]);
    }

    #[test]
    fn implicit_jacobian_matches_finite_differences() {
        let cloud = synth_terrain(SynthKind::Hills { seed: 17 }, 12.0, 0.4).unwrap();
        let terrain = fit_terrain(&cloud, 40, 0).unwrap();
        let geom = VehicleGeometry::default();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let state = YawState::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.0..3.0),
            );
            let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
            // the exact-Hessian mode is needed here: the Gauss-Newton
            // approximation is biased by the nonzero residual of the
            // overdetermined system
            let jac =
                implicit_jacobian_with(&state, &sol, &geom, &terrain, ImplicitMode::ExactHessian)
                    .unwrap();
            let h = 1e-5;
            for c in 0..3 {
                let mut sp = state;
                let mut sm = state;
                match c {
                    0 => {
                        sp.x += h;
                        sm.x -= h;
                    }
                    1 => {
                        sp.y += h;
                        sm.y -= h;
                    }
                    _ => {
                        sp.alpha += h;
                        sm.alpha -= h;
                    }
                }
                let up = solve_pose(&sp, &geom, &terrain, Some(&sol)).unwrap().as_vector();
                let um = solve_pose(&sm, &geom, &terrain, Some(&sol)).unwrap().as_vector();
                for r in 0..N_UNKNOWNS {
                    let fd = (up[r] - um[r]) / (2.0 * h);
                    let err = (jac.matrix[(r, c)] - fd).abs();
                    let tol = 1e-4f64.max(1e-3 * fd.abs());
                    assert!(err <= tol, "entry ({r}, {c}): implicit {} vs fd {fd}", jac.matrix[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let cloud = synth_terrain(SynthKind::Hills { seed: 23 }, 12.0, 0.4).unwrap();
        let terrain = fit_terrain(&cloud, 40, 0).unwrap();
        let geom = VehicleGeometry::default();
        let s0 = YawState::new(0.0, 0.0, 0.4);
        let s1 = YawState::new(0.15, 0.1, 0.45);
        let sol0 = solve_pose(&s0, &geom, &terrain, None).unwrap();
        let warm = solve_pose(&s1, &geom, &terrain, Some(&sol0)).unwrap();
        let cold = solve_pose(&s1, &geom, &terrain, None).unwrap();
        assert!((warm.residual_norm.powi(2) - cold.residual_norm.powi(2)).abs() < 1e-8);
    }

    #[test]
    fn exact_hessian_close_to_gauss_newton_on_smooth_terrain() {
        let cloud = synth_terrain(SynthKind::Hills { seed: 31 }, 12.0, 0.4).unwrap();
        let terrain = fit_terrain(&cloud, 40, 0).unwrap();
        let geom = VehicleGeometry::default();
        let state = YawState::new(0.6, -0.9, 1.1);
        let sol = solve_pose(&state, &geom, &terrain, None).unwrap();
        let gn = implicit_jacobian_with(&state, &sol, &geom, &terrain, ImplicitMode::GaussNewton)
            .unwrap();
        let exact =
            implicit_jacobian_with(&state, &sol, &geom, &terrain, ImplicitMode::ExactHessian)
                .unwrap();
        let diff = (gn.matrix - exact.matrix).norm();
        assert!(diff < 1e-2, "GN vs exact differ by {diff}");
    }

    #[test]
    fn geometry_json_round_trip() {
        let geom = VehicleGeometry::default();
        let json = serde_json::to_string(&geom).unwrap();
        assert!(json.contains("\"h\"") && json.contains("\"legs\""));
        let back: VehicleGeometry = serde_json::from_str(&json).unwrap();
        assert_eq!(back.half_breadth, geom.half_breadth);
    }
}
