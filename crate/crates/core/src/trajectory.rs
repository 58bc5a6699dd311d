//! Polynomial flat-output trajectory representation, smoothness costs, and
//! linear constraint assembly.
//!
//! Positions are `x_k = W_k c_x`, `y_k = W_k c_y` with a monomial basis in
//! normalized time `t/horizon`; velocities and accelerations come from the
//! exact derivative matrices. Heading follows from differential flatness as
//! `atan2(y_dot, x_dot)`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Basis matrices `W`, `W_dot`, `W_ddot` on a uniform time grid.
#[derive(Clone, Debug)]
pub struct BasisMatrices {
    pub w: DMatrix<f64>,
    pub wd: DMatrix<f64>,
    pub wdd: DMatrix<f64>,
    pub times: Vec<f64>,
    pub horizon: f64,
}

impl BasisMatrices {
    pub fn n_steps(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.w.ncols()
    }
}

/// Monomial basis in normalized time, with `W_dot`, `W_ddot` scaled by
/// `1/horizon` and `1/horizon^2`.
pub fn build_basis(n_steps: usize, horizon: f64, order: usize) -> Result<BasisMatrices> {
    if order < 5 {
        return Err(Error::InsufficientOrder { order });
    }
    if n_steps < 2 || horizon <= 0.0 {
        return Err(Error::InvalidParameter(
            "need n_steps >= 2 and horizon > 0".to_string(),
        ));
    }
    let n_coeffs = order + 1;
    let mut w = DMatrix::zeros(n_steps, n_coeffs);
    let mut wd = DMatrix::zeros(n_steps, n_coeffs);
    let mut wdd = DMatrix::zeros(n_steps, n_coeffs);
    let mut times = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let s = k as f64 / (n_steps - 1) as f64; // normalized time
        times.push(s * horizon);
        for p in 0..n_coeffs {
            w[(k, p)] = s.powi(p as i32);
            if p >= 1 {
                wd[(k, p)] = p as f64 * s.powi(p as i32 - 1) / horizon;
            }
            if p >= 2 {
                wdd[(k, p)] = (p * (p - 1)) as f64 * s.powi(p as i32 - 2) / (horizon * horizon);
            }
        }
    }
    Ok(BasisMatrices {
        w,
        wd,
        wdd,
        times,
        horizon,
    })
}

/// Polynomial coefficients for both axes; `stacked` order is `(c_x, c_y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryParams {
    pub c_x: DVector<f64>,
    pub c_y: DVector<f64>,
}

impl TrajectoryParams {
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.c_x.len();
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.c_x[i]
            } else {
                self.c_y[i - n]
            }
        })
    }

    pub fn from_stacked(xi: &DVector<f64>) -> Self {
        let n = xi.len() / 2;
        Self {
            c_x: xi.rows(0, n).into_owned(),
            c_y: xi.rows(n, n).into_owned(),
        }
    }
}

/// Per-step flat outputs along the trajectory.
#[derive(Clone, Debug)]
pub struct FlatOutputs {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub xd: DVector<f64>,
    pub yd: DVector<f64>,
    pub xdd: DVector<f64>,
    pub ydd: DVector<f64>,
    pub alpha: Vec<f64>,
    /// Steps where the speed was below the heading threshold and alpha was
    /// held from the previous step.
    pub zero_velocity_steps: Vec<usize>,
}

const HEADING_SPEED_SQ_MIN: f64 = 1e-10;

/// Positions, derivatives, and heading per step.
pub fn flat_outputs(basis: &BasisMatrices, params: &TrajectoryParams) -> FlatOutputs {
    let x = &basis.w * &params.c_x;
    let y = &basis.w * &params.c_y;
    let xd = &basis.wd * &params.c_x;
    let yd = &basis.wd * &params.c_y;
    let xdd = &basis.wdd * &params.c_x;
    let ydd = &basis.wdd * &params.c_y;
    let mut alpha = Vec::with_capacity(basis.n_steps());
    let mut flagged = Vec::new();
    for k in 0..basis.n_steps() {
        if xd[k] * xd[k] + yd[k] * yd[k] < HEADING_SPEED_SQ_MIN {
            flagged.push(k);
            alpha.push(alpha.last().copied().unwrap_or(0.0));
        } else {
            alpha.push(yd[k].atan2(xd[k]));
        }
    }
    FlatOutputs {
        x,
        y,
        xd,
        yd,
        xdd,
        ydd,
        alpha,
        zero_velocity_steps: flagged,
    }
}

/// Weights and the curvature denominator guard for the smoothness cost.
#[derive(Clone, Copy, Debug)]
pub struct CostConfig {
    pub eps_curv: f64,
    pub weight_accel: f64,
    pub weight_curv: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            eps_curv: 1e-6,
            weight_accel: 1.0,
            weight_curv: 1.0,
        }
    }
}

/// Smoothness cost `c_r = sum_k [ c_a + c_c ]` with
/// `c_a = xdd^2 + ydd^2` and `c_c = ((ydd xd - xdd yd) / (xd^2 + yd^2 +
/// eps)^{3/2})^2` (squared curvature), plus its analytic gradient w.r.t. the
/// stacked coefficients.
pub fn smoothness_cost(
    basis: &BasisMatrices,
    params: &TrajectoryParams,
    config: &CostConfig,
) -> (f64, DVector<f64>) {
    let out = flat_outputs(basis, params);
    let n_c = basis.n_coeffs();
    let mut value = 0.0;
    let mut grad = DVector::zeros(2 * n_c);
    for k in 0..basis.n_steps() {
        let (xd, yd, xdd, ydd) = (out.xd[k], out.yd[k], out.xdd[k], out.ydd[k]);
        let c_a = xdd * xdd + ydd * ydd;
        let v2e = xd * xd + yd * yd + config.eps_curv;
        let den = v2e.powf(1.5);
        let num = ydd * xd - xdd * yd;
        let kappa = num / den;
        value += config.weight_accel * c_a + config.weight_curv * kappa * kappa;

        // per-step partials of the cost w.r.t. (xd, yd, xdd, ydd)
        let dk_dxd = ydd / den - 3.0 * xd * num / (v2e * den);
        let dk_dyd = -xdd / den - 3.0 * yd * num / (v2e * den);
        let dk_dxdd = -yd / den;
        let dk_dydd = xd / den;
        let two_k = 2.0 * config.weight_curv * kappa;
        let d_xd = two_k * dk_dxd;
        let d_yd = two_k * dk_dyd;
        let d_xdd = 2.0 * config.weight_accel * xdd + two_k * dk_dxdd;
        let d_ydd = 2.0 * config.weight_accel * ydd + two_k * dk_dydd;

        for p in 0..n_c {
            grad[p] += d_xd * basis.wd[(k, p)] + d_xdd * basis.wdd[(k, p)];
            grad[n_c + p] += d_yd * basis.wd[(k, p)] + d_ydd * basis.wdd[(k, p)];
        }
    }
    (value, grad)
}

/// Axis-aligned position bounds.
#[derive(Clone, Copy, Debug)]
pub struct BoxBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoxBounds {
    /// The axis-aligned square inscribed in a sensing circle.
    pub fn inscribed_in_circle(center: [f64; 2], radius: f64) -> Self {
        let half = radius / std::f64::consts::SQRT_2;
        Self {
            x_min: center[0] - half,
            x_max: center[0] + half,
            y_min: center[1] - half,
            y_max: center[1] + half,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Stacked linear constraints: 12 boundary equalities and `4 n_steps` box
/// inequalities over the stacked coefficients.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Boundary conditions are 6-vectors `(x, y, xd, yd, xdd, ydd)` at each end.
pub fn assemble_constraints(
    b0: [f64; 6],
    bn: [f64; 6],
    bounds: BoxBounds,
    basis: &BasisMatrices,
) -> Result<ConstraintSet> {
    if bounds.x_min >= bounds.x_max || bounds.y_min >= bounds.y_max {
        return Err(Error::InvalidParameter("empty box bounds".to_string()));
    }
    for bc in [&b0, &bn] {
        if !bounds.contains(bc[0], bc[1]) {
            return Err(Error::InfeasibleBox {
                x: bc[0],
                y: bc[1],
            });
        }
    }
    let n_c = basis.n_coeffs();
    let n_steps = basis.n_steps();
    let last = n_steps - 1;

    let mut a_eq = DMatrix::zeros(12, 2 * n_c);
    let mut b_eq = DVector::zeros(12);
    let rows = [&basis.w, &basis.wd, &basis.wdd];
    for (d, mat) in rows.iter().enumerate() {
        for p in 0..n_c {
            // x-axis: start at row d, end at row 3 + d
            a_eq[(d, p)] = mat[(0, p)];
            a_eq[(3 + d, p)] = mat[(last, p)];
            // y-axis in rows 6..12
            a_eq[(6 + d, n_c + p)] = mat[(0, p)];
            a_eq[(9 + d, n_c + p)] = mat[(last, p)];
        }
        b_eq[d] = b0[2 * d];
        b_eq[3 + d] = bn[2 * d];
        b_eq[6 + d] = b0[2 * d + 1];
        b_eq[9 + d] = bn[2 * d + 1];
    }

    let mut a = DMatrix::zeros(4 * n_steps, 2 * n_c);
    let mut b = DVector::zeros(4 * n_steps);
    for k in 0..n_steps {
        for p in 0..n_c {
            a[(4 * k, p)] = basis.w[(k, p)];
            a[(4 * k + 1, p)] = -basis.w[(k, p)];
            a[(4 * k + 2, n_c + p)] = basis.w[(k, p)];
            a[(4 * k + 3, n_c + p)] = -basis.w[(k, p)];
        }
        b[4 * k] = bounds.x_max;
        b[4 * k + 1] = -bounds.x_min;
        b[4 * k + 2] = bounds.y_max;
        b[4 * k + 3] = -bounds.y_min;
    }

    Ok(ConstraintSet { a_eq, b_eq, a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn line_params(n_c: usize, x0: f64, x1: f64) -> TrajectoryParams {
        let mut c_x = DVector::zeros(n_c);
        c_x[0] = x0;
        c_x[1] = x1 - x0;
        TrajectoryParams {
            c_x,
            c_y: DVector::zeros(n_c),
        }
    }

    #[test]
    fn order_ten_gives_eleven_coeffs() {
        let basis = build_basis(50, 10.0, 10).unwrap();
        assert_eq!(basis.n_coeffs(), 11);
        assert!(matches!(
            build_basis(50, 10.0, 4),
            Err(Error::InsufficientOrder { order: 4 })
        ));
    }

    #[test]
    fn derivative_matrices_match_finite_differences() {
        // dense time grid so the column-wise finite differences are accurate
        let basis = build_basis(20001, 10.0, 8).unwrap();
        let dt = basis.times[1] - basis.times[0];
        for p in 0..basis.n_coeffs() {
            for k in 1..basis.n_steps() - 1 {
                let fd = (basis.w[(k + 1, p)] - basis.w[(k - 1, p)]) / (2.0 * dt);
                assert!((basis.wd[(k, p)] - fd).abs() < 1e-6, "wd col {p} row {k}");
                let fd2 = (basis.wd[(k + 1, p)] - basis.wd[(k - 1, p)]) / (2.0 * dt);
                assert!((basis.wdd[(k, p)] - fd2).abs() < 1e-6, "wdd col {p} row {k}");
            }
        }
    }

    #[test]
    fn constant_coefficients_are_stationary() {
        let basis = build_basis(20, 5.0, 6).unwrap();
        let mut params = line_params(7, 0.0, 0.0);
        params.c_x[0] = 3.0;
        params.c_x[1] = 0.0;
        let out = flat_outputs(&basis, &params);
        for k in 0..20 {
            assert!((out.x[k] - 3.0).abs() < 1e-12);
            assert!(out.xd[k].abs() < 1e-12);
        }
        assert_eq!(out.zero_velocity_steps.len(), 20);
    }

    #[test]
    fn straight_line_heading() {
        let basis = build_basis(30, 10.0, 10).unwrap();
        let params = line_params(11, 0.0, 10.0);
        let out = flat_outputs(&basis, &params);
        assert!(out.alpha.iter().all(|a| a.abs() < 1e-12));

        // swapping axes rotates the heading to pi/2
        let swapped = TrajectoryParams {
            c_x: params.c_y.clone(),
            c_y: params.c_x.clone(),
        };
        let out = flat_outputs(&basis, &swapped);
        assert!(out
            .alpha
            .iter()
            .all(|a| (a - std::f64::consts::FRAC_PI_2).abs() < 1e-12));
    }

    fn quarter_circle_params(basis: &BasisMatrices, radius: f64) -> TrajectoryParams {
        // least-squares fit of a quarter circle arc
        let n = basis.n_steps();
        let targets_x = DVector::from_fn(n, |k, _| {
            radius * (std::f64::consts::FRAC_PI_2 * k as f64 / (n - 1) as f64).cos()
        });
        let targets_y = DVector::from_fn(n, |k, _| {
            radius * (std::f64::consts::FRAC_PI_2 * k as f64 / (n - 1) as f64).sin()
        });
        let pinv = basis
            .w
            .clone()
            .svd(true, true)
            .solve(&DMatrix::from_columns(&[targets_x, targets_y]), 1e-12)
            .unwrap();
        TrajectoryParams {
            c_x: pinv.column(0).into_owned(),
            c_y: pinv.column(1).into_owned(),
        }
    }

    #[test]
    fn circle_arc_heading_matches_tangent() {
        let basis = build_basis(50, 10.0, 10).unwrap();
        let params = quarter_circle_params(&basis, 5.0);
        let out = flat_outputs(&basis, &params);
        for k in 2..48 {
            let phi = std::f64::consts::FRAC_PI_2 * k as f64 / 49.0;
            let tangent = (phi + std::f64::consts::FRAC_PI_2).rem_euclid(2.0 * std::f64::consts::PI);
            let got = out.alpha[k].rem_euclid(2.0 * std::f64::consts::PI);
            assert!((got - tangent).abs() < 1e-3, "step {k}: {got} vs {tangent}");
        }
    }

    #[test]
    fn straight_line_cost_is_zero() {
        let basis = build_basis(50, 10.0, 10).unwrap();
        let params = line_params(11, 0.0, 10.0);
        let (value, _) = smoothness_cost(&basis, &params, &CostConfig::default());
        assert!(value < 1e-16, "cost {value}");
    }

    #[test]
    fn circle_cost_matches_curvature() {
        let radius = 5.0;
        let basis = build_basis(50, 10.0, 10).unwrap();
        let params = quarter_circle_params(&basis, radius);
        let out = flat_outputs(&basis, &params);
        let cfg = CostConfig {
            weight_accel: 0.0,
            ..CostConfig::default()
        };
        let (value, _) = smoothness_cost(&basis, &params, &cfg);
        // per-step c_c should be close to 1/R^2; compare interior average
        let per_step = value / basis.n_steps() as f64;
        let expected = 1.0 / (radius * radius);
        assert!(
            (per_step - expected).abs() / expected < 0.05,
            "per-step curvature cost {per_step} vs {expected}"
        );
        // interior steps individually
        for k in 5..45 {
            let v2e = out.xd[k].powi(2) + out.yd[k].powi(2) + cfg.eps_curv;
            let kappa = (out.ydd[k] * out.xd[k] - out.xdd[k] * out.yd[k]) / v2e.powf(1.5);
            assert!(
                (kappa.powi(2) - expected).abs() / expected < 0.01,
                "step {k}"
            );
        }
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        let basis = build_basis(25, 8.0, 7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let cfg = CostConfig::default();
        for _ in 0..20 {
            let xi = DVector::from_fn(16, |_, _| rng.gen_range(-1.0..1.0));
            let params = TrajectoryParams::from_stacked(&xi);
            let (_, grad) = smoothness_cost(&basis, &params, &cfg);
            let fd = crate::oracle::finite_diff_jacobian(
                |v| {
                    let p = TrajectoryParams::from_stacked(&DVector::from_column_slice(v));
                    vec![smoothness_cost(&basis, &p, &cfg).0]
                },
                xi.as_slice(),
                1e-6,
            );
            for i in 0..16 {
                let scale = grad[i].abs().max(1e-3);
                assert!(
                    (grad[i] - fd[(0, i)]).abs() / scale < 1e-6,
                    "coeff {i}: {} vs {}",
                    grad[i],
                    fd[(0, i)]
                );
            }
        }
    }

    #[test]
    fn constraints_reproduce_boundary_conditions() {
        let basis = build_basis(50, 10.0, 10).unwrap();
        let bounds = BoxBounds::inscribed_in_circle([0.0, 0.0], 7.0);
        let b0 = [-3.0, -2.0, 1.0, 0.0, 0.0, 0.0];
        let bn = [3.0, 2.0, 0.5, 0.5, 0.0, 0.0];
        let set = assemble_constraints(b0, bn, bounds, &basis).unwrap();
        assert_eq!(set.a.nrows(), 4 * 50);
        assert_eq!(set.a_eq.nrows(), 12);
        assert_eq!(set.a_eq.rank(1e-10), 12);

        // any xi satisfying the equalities reproduces the boundary values
        let xi = set
            .a_eq
            .clone()
            .svd(true, true)
            .solve(&set.b_eq, 1e-12)
            .unwrap();
        let params = TrajectoryParams::from_stacked(&xi);
        let out = flat_outputs(&basis, &params);
        let last = 49;
        for (got, want) in [
            (out.x[0], b0[0]),
            (out.y[0], b0[1]),
            (out.xd[0], b0[2]),
            (out.yd[0], b0[3]),
            (out.xdd[0], b0[4]),
            (out.ydd[0], b0[5]),
            (out.x[last], bn[0]),
            (out.y[last], bn[1]),
            (out.xd[last], bn[2]),
            (out.yd[last], bn[3]),
            (out.xdd[last], bn[4]),
            (out.ydd[last], bn[5]),
        ] {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn constraints_reject_endpoint_outside_box() {
        let basis = build_basis(10, 5.0, 6).unwrap();
        let bounds = BoxBounds::inscribed_in_circle([0.0, 0.0], 7.0);
        let b0 = [20.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let bn = [0.0; 6];
        assert!(matches!(
            assemble_constraints(b0, bn, bounds, &basis),
            Err(Error::InfeasibleBox { .. })
        ));
    }

    #[test]
    fn stationary_endpoints_admit_constant_solution() {
        let basis = build_basis(20, 5.0, 8).unwrap();
        let bounds = BoxBounds::inscribed_in_circle([0.0, 0.0], 7.0);
        let point = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0];
        let set = assemble_constraints(point, point, bounds, &basis).unwrap();
        let mut xi = DVector::zeros(18);
        xi[0] = 1.0;
        xi[9] = -1.0;
        assert!((&set.a_eq * &xi - &set.b_eq).amax() < 1e-12);
        assert!((&set.a * &xi - &set.b).max() < 1e-12);
    }
}
