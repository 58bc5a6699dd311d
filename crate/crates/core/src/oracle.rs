//! Independent closed-form and brute-force validators used by the test
//! suites.
//!
//! Everything here is derived from scratch (plane trigonometry, exhaustive
//! enumeration, finite differences) and deliberately avoids the rotation,
//! solver, and QP utilities it is used to check.

use nalgebra::{DMatrix, DVector};

use crate::kinematics::VehicleGeometry;
use crate::terrain::TerrainModel;

/// Closed-form rigid-body contact pose on an inclined plane, for vehicles
/// with equal leg lengths.
#[derive(Clone, Debug)]
pub struct PlanePoseOracle {
    /// Unit plane normal with positive z-component.
    pub normal: [f64; 3],
    /// Plane offset: the plane is `normal . p = offset`.
    pub offset: f64,
    pub geometry: VehicleGeometry,
}

/// Pose returned by the plane oracle.
#[derive(Clone, Debug)]
pub struct PlanePose {
    pub z: f64,
    pub beta: f64,
    pub gamma: f64,
    pub contacts: [[f64; 3]; 4],
}

impl PlanePoseOracle {
    /// Build from the gradient form `z = sx * x + sy * y + c`.
    pub fn from_slope(sx: f64, sy: f64, c: f64, geometry: VehicleGeometry) -> Self {
        let norm = (1.0 + sx * sx + sy * sy).sqrt();
        Self {
            normal: [-sx / norm, -sy / norm, 1.0 / norm],
            offset: c / norm,
            geometry,
        }
    }

    /// Exact pose with all four wheels on the plane and the chassis parallel
    /// to it, heading `alpha`.
    pub fn plane_pose(&self, x: f64, y: f64, alpha: f64) -> PlanePose {
        let n = self.normal;
        let leg = self.geometry.leg_lengths[0];
        let (ca, sa) = (alpha.cos(), alpha.sin());

        // chassis center: normal distance to the plane equals the leg length
        let z = (self.offset + leg - n[0] * x - n[1] * y) / n[2];
        let center = [x, y, z];

        // body x-axis: in-plane direction whose horizontal projection is the
        // heading; body z-axis: the plane normal
        let t = -(n[0] * ca + n[1] * sa) / n[2];
        let unorm = (ca * ca + sa * sa + t * t).sqrt();
        let u = [ca / unorm, sa / unorm, t / unorm];
        let v = [
            n[1] * u[2] - n[2] * u[1],
            n[2] * u[0] - n[0] * u[2],
            n[0] * u[1] - n[1] * u[0],
        ];

        let mut contacts = [[0.0; 3]; 4];
        for i in 0..4 {
            let d = self.geometry.wheel_offset(i);
            for k in 0..3 {
                contacts[i][k] = center[k] + u[k] * d[0] + v[k] * d[1] + n[k] * d[2];
            }
        }

        // extract roll/pitch from m = Rz(-alpha) n:
        // (sin g cos b, -sin b, cos g cos b) = m
        let m = [ca * n[0] + sa * n[1], -sa * n[0] + ca * n[1], n[2]];
        let beta = (-m[1]).asin();
        let gamma = m[0].atan2(m[2]);

        PlanePose {
            z,
            beta,
            gamma,
            contacts,
        }
    }
}

/// A [`TerrainModel`] that is an exact plane `z = sx x + sy y + c` to within
/// ~1e-9 over a desk-scale patch, built from a single near-zero-frequency
/// sine term (whose curvature over the patch is negligible) plus a constant.
pub fn plane_model(sx: f64, sy: f64, c: f64) -> TerrainModel {
    let eps = 1e-6;
    let s = (sx * sx + sy * sy).sqrt();
    let (w, amp) = if s < 1e-15 {
        ([0.0, 0.0], 0.0)
    } else {
        ([eps * sx / s, eps * sy / s], s / eps)
    };
    TerrainModel {
        n: 1,
        center: [0.0, 0.0],
        frequencies: vec![[0.0, 0.0, w[0], w[1]]],
        weights: vec![[c, amp]],
        fit_rmse: 0.0,
    }
}

/// Central finite differences, column-wise.
pub fn finite_diff_jacobian<F>(f: F, point: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = point.len();
    let probe = f(point);
    let m = probe.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = point.to_vec();
    for col in 0..n {
        xp[col] = point[col] + h;
        let fp = f(&xp);
        xp[col] = point[col] - h;
        let fm = f(&xp);
        xp[col] = point[col];
        for row in 0..m {
            jac[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }
    jac
}

/// Planar tip-over reduction: under a gravity-only force, the vehicle is
/// stable about an axis iff the COM's vertical line falls inside the axis
/// span. Returns `true` when stable. `com_height` does not affect the
/// boundary, only the angle magnitude.
pub fn tipover_2d(com_offset: f64, axis_half_span: f64, _com_height: f64) -> bool {
    com_offset.abs() <= axis_half_span
}

/// Exhaustive active-set enumeration for the projection QP
/// `min 1/2 ||x - target||^2  s.t.  A_eq x = b_eq, A x <= b`.
///
/// Enumerates every subset of inequality rows as a candidate active set,
/// solves the resulting equality-constrained projection in closed form, and
/// keeps the feasible candidate with nonnegative multipliers. Only usable
/// for small instances (cost is `2^rows`).
pub fn qp_project_brute_force(
    target: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n_in = a_in.nrows();
    assert!(n_in <= 20, "brute-force oracle limited to 20 inequality rows");
    let mut best: Option<(f64, DVector<f64>)> = None;

    for mask in 0u32..(1u32 << n_in) {
        let active: Vec<usize> = (0..n_in).filter(|i| mask & (1 << i) != 0).collect();
        let rows = a_eq.nrows() + active.len();
        if rows > target.len() {
            continue;
        }
        let mut m = DMatrix::zeros(rows, target.len());
        let mut rhs = DVector::zeros(rows);
        for r in 0..a_eq.nrows() {
            m.row_mut(r).copy_from(&a_eq.row(r));
            rhs[r] = b_eq[r];
        }
        for (k, &i) in active.iter().enumerate() {
            m.row_mut(a_eq.nrows() + k).copy_from(&a_in.row(i));
            rhs[a_eq.nrows() + k] = b_in[i];
        }

        // x = t - M^T (M M^T)^{-1} (M t - rhs); multipliers are the solve.
        let gram = &m * m.transpose();
        let Some(chol) = gram.clone().cholesky() else {
            continue;
        };
        let mult = chol.solve(&(&m * target - &rhs));
        let x = target - m.transpose() * &mult;

        // multipliers of active inequality rows must be nonnegative
        let lambda_ok = active
            .iter()
            .enumerate()
            .all(|(k, _)| mult[a_eq.nrows() + k] >= -1e-9);
        if !lambda_ok {
            continue;
        }
        // primal feasibility of every inequality
        let slack = a_in * &x - b_in;
        if slack.iter().any(|s| *s > 1e-8) {
            continue;
        }
        if (a_eq * &x - b_eq).amax() > 1e-8 {
            continue;
        }
        let obj = (&x - target).norm_squared();
        if best.as_ref().map(|(b, _)| obj < *b - 1e-12).unwrap_or(true) {
            best = Some((obj, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Minimize `x^T Q x` subject to `A x = b` via the KKT system, solved with a
/// rank-tolerant SVD (returns a minimum-norm minimizer when `Q` is singular
/// on the feasible subspace).
pub fn min_quadratic_under_equalities(
    q: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let n = q.nrows();
    let m = a.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(2.0 * q));
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(b);
    let sol = kkt.svd(true, true).solve(&rhs, 1e-10).expect("KKT solve");
    sol.rows(0, n).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{loop_closure_residuals, PoseVector, YawState};

    fn equal_leg_geom(l: f64) -> VehicleGeometry {
        VehicleGeometry {
            leg_lengths: [l; 4],
            ..VehicleGeometry::default()
        }
    }

    fn oracle_pose_vector(p: &PlanePose) -> PoseVector {
        let mut u = PoseVector::zeros();
        u[0] = p.z;
        u[1] = p.beta;
        u[2] = p.gamma;
        for i in 0..4 {
            for k in 0..3 {
                u[3 + 3 * i + k] = p.contacts[i][k];
            }
        }
        u
    }

    #[test]
    fn horizontal_plane_pose() {
        let oracle = PlanePoseOracle::from_slope(0.0, 0.0, 0.4, equal_leg_geom(0.3));
        let p = oracle.plane_pose(1.0, 2.0, 0.7);
        assert!((p.z - 0.7).abs() < 1e-12);
        assert!(p.beta.abs() < 1e-12 && p.gamma.abs() < 1e-12);
    }

    #[test]
    fn inclined_plane_pose_closes_the_loop() {
        // the oracle pose must zero the loop-closure residuals on the
        // matching near-exact plane terrain model
        let geom = equal_leg_geom(0.3);
        for (sx, sy, alpha) in [
            (0.2, 0.0, 0.0),
            (0.2, 0.0, std::f64::consts::FRAC_PI_2),
            (0.15, -0.1, 0.8),
        ] {
            let oracle = PlanePoseOracle::from_slope(sx, sy, 0.0, geom.clone());
            let p = oracle.plane_pose(0.3, -0.2, alpha);
            let u = oracle_pose_vector(&p);
            let terrain = plane_model(sx, sy, 0.0);
            let state = YawState::new(0.3, -0.2, alpha);
            let g = loop_closure_residuals(&state, &u, &geom, &terrain).unwrap();
            assert!(g.norm() < 1e-8, "residual {} for ({sx}, {sy}, {alpha})", g.norm());
        }
    }

    #[test]
    fn incline_angles_match_convention() {
        let geom = equal_leg_geom(0.3);
        let oracle = PlanePoseOracle::from_slope(0.2, 0.0, 0.0, geom);
        let p = oracle.plane_pose(0.0, 0.0, 0.0);
        assert!((p.gamma + 0.2f64.atan()).abs() < 1e-10);
        assert!(p.beta.abs() < 1e-10);

        let p = oracle.plane_pose(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        assert!((p.beta + 0.2f64.atan()).abs() < 1e-10, "beta {}", p.beta);
        assert!(p.gamma.abs() < 1e-10, "gamma {}", p.gamma);
    }

    #[test]
    fn plane_model_is_planar() {
        let model = plane_model(0.2, -0.1, 0.3);
        for (x, y) in [(0.0, 0.0), (3.0, -4.0), (-5.0, 5.0)] {
            let z = model.height(x, y).unwrap();
            assert!((z - (0.2 * x - 0.1 * y + 0.3)).abs() < 1e-8);
            let g = model.height_gradient(x, y).unwrap();
            assert!((g[0] - 0.2).abs() < 1e-9 && (g[1] + 0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_identity_and_quadratic() {
        let id = finite_diff_jacobian(|x| x.to_vec(), &[0.3, -0.7, 1.1], 1e-5);
        assert!((id - DMatrix::identity(3, 3)).amax() < 1e-10);

        // quadratic form: central differences are exact up to rounding
        let q = |x: &[f64]| vec![x[0] * x[0] + 2.0 * x[0] * x[1] + 3.0 * x[1] * x[1]];
        let j = finite_diff_jacobian(q, &[0.4, -0.2], 1e-4);
        assert!((j[(0, 0)] - (2.0 * 0.4 + 2.0 * -0.2)).abs() < 1e-8);
        assert!((j[(0, 1)] - (2.0 * 0.4 + 6.0 * -0.2)).abs() < 1e-8);
    }

    #[test]
    fn tipover_2d_boundaries() {
        assert!(tipover_2d(0.0, 0.3, 0.2));
        assert!(!tipover_2d(0.35, 0.3, 0.2));
        assert!(tipover_2d(0.3, 0.3, 0.2));
    }

    #[test]
    fn brute_force_projection_simple_box() {
        // project (2, 2) onto x <= 1, y <= 1 with x = y
        let target = DVector::from_vec(vec![2.0, 2.0]);
        let a_eq = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let b_eq = DVector::from_vec(vec![0.0]);
        let a_in = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b_in = DVector::from_vec(vec![1.0, 1.0]);
        let x = qp_project_brute_force(&target, &a_eq, &b_eq, &a_in, &b_in).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equality_quadratic_minimizer() {
        // min x^2 + y^2 s.t. x + y = 2 -> (1, 1)
        let q = DMatrix::identity(2, 2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let x = min_quadratic_under_equalities(&q, &a, &b);
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 1.0).abs() < 1e-9);
    }
}
