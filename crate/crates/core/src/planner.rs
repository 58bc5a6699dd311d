//! Bi-level trajectory optimizer: projected gradient descent over the
//! polynomial coefficients with the pose NLS solved per timestep in the
//! inner layer.
//!
//! The stability gradient is assembled as a vector-Jacobian chain: per step
//! the implicit derivative of the pose gives `dc_s/d(x, y, alpha)`, which is
//! pushed through the basis rows and the heading `atan2`. The full
//! `du*/dxi` Jacobian is never formed.

use std::time::Instant;

use nalgebra::DVector;

use crate::kinematics::{
    implicit_jacobian_with, solve_pose, ImplicitMode, PoseSolution, VehicleGeometry, YawState,
};
use crate::qp;
use crate::stability::{stability_cost_gradient, stability_report, StabilityConfig, StabilityReport};
use crate::terrain::TerrainModel;
use crate::trajectory::{
    flat_outputs, smoothness_cost, BasisMatrices, ConstraintSet, CostConfig, TrajectoryParams,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct PlannerConfig {
    /// Learning rate for the outer gradient step.
    pub eta: f64,
    pub max_iters: usize,
    /// Nesterov-style momentum coefficient in [0, 1). Zero gives plain
    /// projected gradient descent with a monotone cost trace.
    pub momentum: f64,
    /// Stop when the infinity norm of the coefficient step drops below this.
    pub tol: f64,
    /// Drop the stability term from the objective (smoothness only).
    pub use_stability: bool,
    pub stability: StabilityConfig,
    pub cost: CostConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            max_iters: 100,
            momentum: 0.9,
            tol: 1e-6,
            use_stability: true,
            stability: StabilityConfig::gravity_only(50.0),
            cost: CostConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "need eta > 0 and max_iters >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(
                "momentum must lie in [0, 1)".to_string(),
            ));
        }
        self.stability.validate()
    }
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub params: TrajectoryParams,
    pub poses: Vec<PoseSolution>,
    pub reports: Vec<StabilityReport>,
    /// Total cost after each outer iteration, starting with the initial
    /// point.
    pub cost_trace: Vec<f64>,
    pub cost_r: f64,
    pub cost_s: f64,
    pub wall_time_s: f64,
    pub converged: bool,
    /// Number of inner NLS solves performed.
    pub nls_calls: u64,
    /// Iterations where backtracking could not restore descent.
    pub non_monotone_iters: Vec<usize>,
    /// Every accepted outer iterate, starting with the projected initial
    /// guess.
    pub iterates: Vec<TrajectoryParams>,
}

impl PlanResult {
    pub fn min_tipover_angle(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.min_angle)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn mean_min_tipover_angle(&self) -> f64 {
        if self.reports.is_empty() {
            return f64::NAN;
        }
        self.reports.iter().map(|r| r.min_angle).sum::<f64>() / self.reports.len() as f64
    }
}

/// Project coefficient parameters onto the constraint set.
pub fn project(params: &TrajectoryParams, constraints: &ConstraintSet) -> Result<TrajectoryParams> {
    let p = qp::project(&params.stacked(), constraints)?;
    Ok(TrajectoryParams::from_stacked(&p.point))
}

/// Least-squares fit of a straight line between the endpoint positions
/// encoded in the equality constraints.
fn straight_line_params(basis: &BasisMatrices, constraints: &ConstraintSet) -> TrajectoryParams {
    let b = &constraints.b_eq;
    let (sx, sy) = (b[0], b[6]);
    let (gx, gy) = (b[3], b[9]);
    let n = basis.n_steps();
    let horizon = basis.horizon;
    let xs = DVector::from_fn(n, |k, _| sx + (gx - sx) * basis.times[k] / horizon);
    let ys = DVector::from_fn(n, |k, _| sy + (gy - sy) * basis.times[k] / horizon);
    let svd = basis.w.clone().svd(true, true);
    let c_x = svd.solve(&xs, 1e-12).expect("svd solve");
    let c_y = svd.solve(&ys, 1e-12).expect("svd solve");
    TrajectoryParams { c_x, c_y }
}

struct Evaluation {
    cost_r: f64,
    cost_s: f64,
    total: f64,
    grad: DVector<f64>,
    poses: Vec<PoseSolution>,
    reports: Vec<StabilityReport>,
}

fn evaluate(
    terrain: &TerrainModel,
    geom: &VehicleGeometry,
    basis: &BasisMatrices,
    params: &TrajectoryParams,
    config: &PlannerConfig,
    warm: Option<&[PoseSolution]>,
    with_grad: bool,
    nls_calls: &mut u64,
) -> Result<Evaluation> {
    let out = flat_outputs(basis, params);
    let (cost_r, grad_r) = smoothness_cost(basis, params, &config.cost);
    let n_steps = basis.n_steps();
    let n_c = basis.n_coeffs();

    let mut poses: Vec<PoseSolution> = Vec::with_capacity(n_steps);
    let mut reports = Vec::with_capacity(n_steps);
    let mut cost_s = 0.0;
    let mut grad = grad_r;
    for k in 0..n_steps {
        let state = YawState::new(out.x[k], out.y[k], out.alpha[k]);
        let warm_pose = warm.and_then(|w| w.get(k)).or(poses.last());
        *nls_calls += 1;
        let pose = match solve_pose(&state, geom, terrain, warm_pose) {
            Ok(p) => p,
            Err(_) => {
                *nls_calls += 1;
                solve_pose(&state, geom, terrain, None).map_err(|e| Error::InnerSolverFailure {
                    step: k,
                    source: Box::new(e),
                })?
            }
        };
        let com = [state.x, state.y, pose.z];
        let report = stability_report(&pose, com, &config.stability)?;
        if config.use_stability {
            cost_s += report.cost;
            if with_grad {
                // exact-Hessian implicit mode: the Gauss-Newton variant is
                // biased by the nonzero residual and fails the
                // finite-difference check of the assembled gradient
                let jac = implicit_jacobian_with(
                    &state,
                    &pose,
                    geom,
                    terrain,
                    ImplicitMode::ExactHessian,
                )?;
                let g3 = stability_cost_gradient(&state, &pose, &jac, &config.stability)?;
                let heading_free = !out.zero_velocity_steps.contains(&k);
                let (da_dxd, da_dyd) = if heading_free {
                    let v2 = out.xd[k] * out.xd[k] + out.yd[k] * out.yd[k];
                    (-out.yd[k] / v2, out.xd[k] / v2)
                } else {
                    (0.0, 0.0)
                };
                for p in 0..n_c {
                    grad[p] += g3[0] * basis.w[(k, p)] + g3[2] * da_dxd * basis.wd[(k, p)];
                    grad[n_c + p] += g3[1] * basis.w[(k, p)] + g3[2] * da_dyd * basis.wd[(k, p)];
                }
            }
        }
        poses.push(pose);
        reports.push(report);
    }

    let total = cost_r + if config.use_stability { cost_s } else { 0.0 };
    Ok(Evaluation {
        cost_r,
        cost_s,
        total,
        grad,
        poses,
        reports,
    })
}

/// Stability cost summed along the trajectory together with its total
/// gradient w.r.t. the stacked coefficients. Exposed for gradient
/// verification against finite differences of the full pipeline.
pub fn stability_path_cost(
    terrain: &TerrainModel,
    geom: &VehicleGeometry,
    basis: &BasisMatrices,
    params: &TrajectoryParams,
    stability: &StabilityConfig,
) -> Result<(f64, DVector<f64>)> {
    let config = PlannerConfig {
        use_stability: true,
        stability: *stability,
        cost: CostConfig {
            weight_accel: 0.0,
            weight_curv: 0.0,
            ..CostConfig::default()
        },
        ..PlannerConfig::default()
    };
    let mut calls = 0;
    let eval = evaluate(terrain, geom, basis, params, &config, None, true, &mut calls)?;
    Ok((eval.cost_s, eval.grad))
}

/// Worst constraint violation of the stacked coefficients, zero when
/// feasible.
pub fn feasibility_violation(params: &TrajectoryParams, constraints: &ConstraintSet) -> f64 {
    let xi = params.stacked();
    let eq = if constraints.a_eq.nrows() > 0 {
        (&constraints.a_eq * &xi - &constraints.b_eq).amax()
    } else {
        0.0
    };
    let inq = (&constraints.a * &xi - &constraints.b).max().max(0.0);
    eq.max(inq)
}

/// Run the bi-level planner.
pub fn plan(
    terrain: &TerrainModel,
    geom: &VehicleGeometry,
    constraints: &ConstraintSet,
    basis: &BasisMatrices,
    config: &PlannerConfig,
    init: Option<&TrajectoryParams>,
) -> Result<PlanResult> {
    config.validate()?;
    let start = Instant::now();
    let mut nls_calls = 0u64;

    // constraint consistency check
    qp::project(&DVector::zeros(2 * basis.n_coeffs()), constraints)?;

    let init_params = match init {
        Some(p) => p.clone(),
        None => straight_line_params(basis, constraints),
    };
    let mut xi = project(&init_params, constraints)?;
    let mut xi_prev = xi.clone();

    let mut cur = evaluate(terrain, geom, basis, &xi, config, None, true, &mut nls_calls)?;
    let mut trace = vec![cur.total];
    let mut iterates = vec![xi.clone()];
    let mut non_monotone = Vec::new();
    let mut eta = config.eta;
    let eta_max = config.eta * 1e3;
    let mut converged = false;

    for iter in 0..config.max_iters {
        let (look_params, look) = if config.momentum > 0.0 && iter > 0 {
            let extrapolated = TrajectoryParams::from_stacked(
                &(xi.stacked() + (xi.stacked() - xi_prev.stacked()) * config.momentum),
            );
            let p = project(&extrapolated, constraints)?;
            let e = evaluate(
                terrain,
                geom,
                basis,
                &p,
                config,
                Some(&cur.poses),
                true,
                &mut nls_calls,
            )?;
            (p, e)
        } else {
            (
                xi.clone(),
                evaluate(
                    terrain,
                    geom,
                    basis,
                    &xi,
                    config,
                    Some(&cur.poses),
                    true,
                    &mut nls_calls,
                )?,
            )
        };

        let reference = cur.total.max(look.total);
        let mut accepted: Option<(TrajectoryParams, Evaluation)> = None;
        let mut halvings = 0;
        while halvings <= 10 {
            let trial = TrajectoryParams::from_stacked(&(look_params.stacked() - eta * &look.grad));
            let cand = project(&trial, constraints)?;
            let eval = evaluate(
                terrain,
                geom,
                basis,
                &cand,
                config,
                Some(&cur.poses),
                true,
                &mut nls_calls,
            )?;
            if eval.total <= reference + 1e-12 {
                accepted = Some((cand, eval));
                break;
            }
            if halvings == 10 && config.momentum > 0.0 {
                // momentum steps may overshoot; keep the iterate and log it
                non_monotone.push(iter);
                accepted = Some((cand, eval));
                break;
            }
            eta *= 0.5;
            halvings += 1;
        }
        let Some((next, eval)) = accepted else {
            // plain PGD could not descend at all: stationary to within the
            // step budget
            converged = true;
            break;
        };
        if halvings == 0 {
            eta = (eta * 2.0).min(eta_max);
        }

        debug_assert!(feasibility_violation(&next, constraints) <= 1e-8);
        let step = (next.stacked() - xi.stacked()).amax();
        xi_prev = xi;
        xi = next;
        cur = eval;
        trace.push(cur.total);
        iterates.push(xi.clone());
        if step <= config.tol {
            converged = true;
            break;
        }
    }

    Ok(PlanResult {
        params: xi,
        poses: cur.poses,
        reports: cur.reports,
        cost_trace: trace,
        cost_r: cur.cost_r,
        cost_s: cur.cost_s,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged,
        nls_calls,
        non_monotone_iters: non_monotone,
        iterates,
    })
}
