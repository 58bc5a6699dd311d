//! Cross-entropy method baseline over the same coefficient parametrization,
//! costs, and constraint set as the gradient planner.
//!
//! Each iteration samples coefficients from a diagonal Gaussian, projects
//! every sample onto the constraint set, scores it with the full bi-level
//! objective (cold-start inner solves), and refits the distribution to the
//! elite fraction. The best sample ever seen is returned.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kinematics::{solve_pose, PoseSolution, VehicleGeometry, YawState};
use crate::planner::{project, PlanResult};
use crate::stability::{stability_report, StabilityConfig, StabilityReport};
use crate::terrain::TerrainModel;
use crate::trajectory::{
    flat_outputs, smoothness_cost, BasisMatrices, ConstraintSet, CostConfig, TrajectoryParams,
};
use crate::{Error, Result};

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct CemConfig {
    pub batch_size: usize,
    /// Fraction of the batch refit as the elite set, in (0, 1].
    pub elite_fraction: f64,
    pub n_iterations: usize,
    /// Initial per-coefficient standard deviation.
    pub initial_std: f64,
    pub seed: u64,
    pub use_stability: bool,
    pub stability: StabilityConfig,
    pub cost: CostConfig,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            elite_fraction: 0.1,
            n_iterations: 30,
            initial_std: 0.5,
            seed: 0,
            use_stability: true,
            stability: StabilityConfig::gravity_only(50.0),
            cost: CostConfig::default(),
        }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        ((self.batch_size as f64 * self.elite_fraction).ceil() as usize).clamp(1, self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_iterations == 0 {
            return Err(Error::InvalidParameter(
                "batch_size and n_iterations must be positive".to_string(),
            ));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::InvalidParameter(
                "elite_fraction must lie in (0, 1]".to_string(),
            ));
        }
        if self.initial_std <= 0.0 {
            return Err(Error::InvalidParameter(
                "initial_std must be positive".to_string(),
            ));
        }
        self.stability.validate()
    }
}

struct Scored {
    cost_r: f64,
    cost_s: f64,
    total: f64,
    poses: Vec<PoseSolution>,
    reports: Vec<StabilityReport>,
}

fn score(
    terrain: &TerrainModel,
    geom: &VehicleGeometry,
    basis: &BasisMatrices,
    params: &TrajectoryParams,
    config: &CemConfig,
    nls_calls: &mut u64,
) -> Result<Scored> {
    let out = flat_outputs(basis, params);
    let (cost_r, _) = smoothness_cost(basis, params, &config.cost);
    let mut poses = Vec::with_capacity(basis.n_steps());
    let mut reports = Vec::with_capacity(basis.n_steps());
    let mut cost_s = 0.0;
    for k in 0..basis.n_steps() {
        let state = YawState::new(out.x[k], out.y[k], out.alpha[k]);
        *nls_calls += 1;
        let pose = solve_pose(&state, geom, terrain, None).map_err(|e| Error::InnerSolverFailure {
            step: k,
            source: Box::new(e),
        })?;
        let report = stability_report(&pose, [state.x, state.y, pose.z], &config.stability)?;
        if config.use_stability {
            cost_s += report.cost;
        }
        poses.push(pose);
        reports.push(report);
    }
    let total = cost_r + if config.use_stability { cost_s } else { 0.0 };
    Ok(Scored {
        cost_r,
        cost_s,
        total,
        poses,
        reports,
    })
}

fn straight_line_mean(basis: &BasisMatrices, constraints: &ConstraintSet) -> TrajectoryParams {
    let b = &constraints.b_eq;
    let (sx, sy, gx, gy) = (b[0], b[6], b[3], b[9]);
    let horizon = basis.horizon;
    let xs = DVector::from_fn(basis.n_steps(), |k, _| {
        sx + (gx - sx) * basis.times[k] / horizon
    });
    let ys = DVector::from_fn(basis.n_steps(), |k, _| {
        sy + (gy - sy) * basis.times[k] / horizon
    });
    let svd = basis.w.clone().svd(true, true);
    TrajectoryParams {
        c_x: svd.solve(&xs, 1e-12).expect("svd solve"),
        c_y: svd.solve(&ys, 1e-12).expect("svd solve"),
    }
}

/// Run the CEM planner. Deterministic for a fixed seed.
pub fn plan_cem(
    terrain: &TerrainModel,
    geom: &VehicleGeometry,
    constraints: &ConstraintSet,
    basis: &BasisMatrices,
    config: &CemConfig,
    init: Option<&TrajectoryParams>,
) -> Result<PlanResult> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nls_calls = 0u64;
    let dim = 2 * basis.n_coeffs();

    let mean_init = match init {
        Some(p) => p.clone(),
        None => straight_line_mean(basis, constraints),
    };
    let mut mean = project(&mean_init, constraints)?.stacked();
    let mut std = DVector::from_element(dim, config.initial_std);
    let elite_count = config.elite_count();

    let mut best: Option<(f64, TrajectoryParams, Scored)> = None;
    let mut trace = Vec::with_capacity(config.n_iterations);

    for _ in 0..config.n_iterations {
        let mut batch: Vec<(f64, DVector<f64>)> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let sample = DVector::from_fn(dim, |i, _| {
                mean[i] + std[i] * rng.sample::<f64, _>(StandardNormal)
            });
            let projected = project(&TrajectoryParams::from_stacked(&sample), constraints)?;
            // samples whose inner solve diverges are discarded
            let Ok(s) = score(terrain, geom, basis, &projected, config, &mut nls_calls) else {
                continue;
            };
            let total = s.total;
            let xi = projected.stacked();
            if best.as_ref().map_or(true, |(c, _, _)| total < *c) {
                best = Some((total, projected, s));
            }
            batch.push((total, xi));
        }
        if batch.is_empty() {
            return Err(Error::InvalidParameter(
                "every CEM sample failed the inner solve".to_string(),
            ));
        }
        trace.push(best.as_ref().map(|(c, _, _)| *c).unwrap_or(f64::INFINITY));

        batch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n_elite = elite_count.min(batch.len());
        for i in 0..dim {
            let m = batch[..n_elite].iter().map(|(_, xi)| xi[i]).sum::<f64>() / n_elite as f64;
            let var = batch[..n_elite]
                .iter()
                .map(|(_, xi)| (xi[i] - m) * (xi[i] - m))
                .sum::<f64>()
                / n_elite as f64;
            mean[i] = m;
            std[i] = var.sqrt().max(STD_FLOOR);
        }
    }

    let (_, params, s) = best
        .ok_or_else(|| Error::InvalidParameter("no feasible CEM sample".to_string()))?;
    Ok(PlanResult {
        params,
        poses: s.poses,
        reports: s.reports,
        cost_trace: trace,
        cost_r: s.cost_r,
        cost_s: s.cost_s,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged: true,
        nls_calls,
        non_monotone_iters: vec![],
        iterates: vec![],
    })
}
