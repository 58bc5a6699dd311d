//! Dense active-set solver for the projection QP
//! `min 1/2 ||xi_bar - xi||^2  s.t.  A_eq xi = b_eq, A xi <= b`.
//!
//! With an identity Hessian every equality-constrained subproblem has the
//! closed form `xi = xi_bar - M^T (M M^T)^{-1} (M xi_bar - m)`, so the
//! active-set loop alternates between adding the most violated inequality
//! and dropping the most negative multiplier until the KKT conditions hold
//! exactly. The problem is small (~100 variables) and dense.

use nalgebra::{DMatrix, DVector};

use crate::trajectory::ConstraintSet;
use crate::{Error, Result};

const FEAS_TOL: f64 = 1e-10;

/// Projection output: the optimal point plus the KKT multipliers of the
/// final working set.
#[derive(Clone, Debug)]
pub struct Projection {
    pub point: DVector<f64>,
    /// Multipliers of the equality rows.
    pub eq_multipliers: DVector<f64>,
    /// `(row index, multiplier)` of the active inequality rows.
    pub active: Vec<(usize, f64)>,
}

/// Project onto a [`ConstraintSet`].
pub fn project(target: &DVector<f64>, constraints: &ConstraintSet) -> Result<Projection> {
    project_raw(
        target,
        &constraints.a_eq,
        &constraints.b_eq,
        &constraints.a,
        &constraints.b,
    )
}

/// Projection with explicit constraint matrices.
pub fn project_raw(
    target: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
) -> Result<Projection> {
    let n = target.len();
    let n_eq = a_eq.nrows();
    let n_in = a_in.nrows();
    let mut working: Vec<usize> = Vec::new();

    let solve_eqp = |working: &[usize]| -> Option<(DVector<f64>, DVector<f64>)> {
        let rows = n_eq + working.len();
        let mut m = DMatrix::zeros(rows, n);
        let mut rhs = DVector::zeros(rows);
        for r in 0..n_eq {
            m.row_mut(r).copy_from(&a_eq.row(r));
            rhs[r] = b_eq[r];
        }
        for (k, &i) in working.iter().enumerate() {
            m.row_mut(n_eq + k).copy_from(&a_in.row(i));
            rhs[n_eq + k] = b_in[i];
        }
        let gram = &m * m.transpose();
        let residual = &m * target - &rhs;
        let mult = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&residual),
            None => gram.svd(true, true).solve(&residual, 1e-12).ok()?,
        };
        let x = target - m.transpose() * &mult;
        // consistency: the working-set rows must actually be satisfied
        if (&m * &x - &rhs).amax() > 1e-6 {
            return None;
        }
        Some((x, mult))
    };

    let max_iters = 20 * (n_in + n_eq + 1);
    let mut last: Option<(DVector<f64>, DVector<f64>)> = None;
    for _ in 0..max_iters {
        let Some((x, mult)) = solve_eqp(&working) else {
            return Err(Error::ProjectionInfeasible(
                "inconsistent working set".to_string(),
            ));
        };

        // drop the most negative inequality multiplier, if any
        let mut drop_idx = None;
        let mut most_negative = -FEAS_TOL;
        for k in 0..working.len() {
            let lambda = mult[n_eq + k];
            if lambda < most_negative {
                most_negative = lambda;
                drop_idx = Some(k);
            }
        }
        if let Some(k) = drop_idx {
            working.remove(k);
            continue;
        }

        // add the most violated inactive inequality, if any
        let mut add_idx = None;
        let mut worst = FEAS_TOL;
        for i in 0..n_in {
            if working.contains(&i) {
                continue;
            }
            let violation = a_in.row(i).dot(&x.transpose()) - b_in[i];
            if violation > worst {
                worst = violation;
                add_idx = Some(i);
            }
        }
        match add_idx {
            Some(i) => {
                working.push(i);
                last = Some((x, mult));
            }
            None => {
                return Ok(Projection {
                    point: x,
                    eq_multipliers: mult.rows(0, n_eq).into_owned(),
                    active: working
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| (i, mult[n_eq + k]))
                        .collect(),
                });
            }
        }
    }
    let _ = last;
    Err(Error::ProjectionInfeasible(
        "active-set iteration cap reached".to_string(),
    ))
}

/// KKT residuals of a candidate projection, for verification.
#[derive(Clone, Debug)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_in: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Evaluate the KKT system at a projection returned by [`project_raw`].
pub fn kkt_residuals(
    target: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    projection: &Projection,
) -> KktResiduals {
    let x = &projection.point;
    // stationarity: x - target + A_eq^T mu + sum lambda_i a_i = 0
    let mut grad = x - target + a_eq.transpose() * &projection.eq_multipliers;
    for &(i, lambda) in &projection.active {
        grad += a_in.row(i).transpose() * lambda;
    }
    let primal_eq = if a_eq.nrows() > 0 {
        (a_eq * x - b_eq).amax()
    } else {
        0.0
    };
    let primal_in = (a_in * x - b_in).max().max(0.0);
    let dual = projection
        .active
        .iter()
        .map(|&(_, l)| (-l).max(0.0))
        .fold(0.0, f64::max);
    let complementarity = projection
        .active
        .iter()
        .map(|&(i, l)| (l * (a_in.row(i).dot(&x.transpose()) - b_in[i])).abs())
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.amax(),
        primal_eq,
        primal_in,
        dual,
        complementarity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{assemble_constraints, build_basis, BoxBounds};
    use rand::{Rng, SeedableRng};

    fn small_problem() -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let a_eq = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b_eq = DVector::from_vec(vec![1.0]);
        let a_in = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b_in = DVector::from_vec(vec![0.8, 0.8, 0.8]);
        (a_eq, b_eq, a_in, b_in)
    }

    #[test]
    fn feasible_point_is_unchanged() {
        let (a_eq, b_eq, a_in, b_in) = small_problem();
        let t = DVector::from_vec(vec![0.3, 0.3, 0.4]);
        let p = project_raw(&t, &a_eq, &b_eq, &a_in, &b_in).unwrap();
        assert!((p.point - t).amax() < 1e-10);
    }

    #[test]
    fn equality_only_matches_closed_form() {
        let basis = build_basis(10, 5.0, 6).unwrap();
        let bounds = BoxBounds {
            x_min: -1e6,
            x_max: 1e6,
            y_min: -1e6,
            y_max: 1e6,
        };
        let set = assemble_constraints(
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [4.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            bounds,
            &basis,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = DVector::from_fn(14, |_, _| rng.gen_range(-2.0..2.0));
        let p = project(&t, &set).unwrap();

        let gram = &set.a_eq * set.a_eq.transpose();
        let mult = gram
            .cholesky()
            .unwrap()
            .solve(&(&set.a_eq * &t - &set.b_eq));
        let closed = &t - set.a_eq.transpose() * mult;
        assert!((p.point - closed).amax() < 1e-9);
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a_eq = DMatrix::from_fn(2, 6, |_, _| rng.gen_range(-1.0..1.0));
            let b_eq = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5));
            let a_in = DMatrix::from_fn(8, 6, |_, _| rng.gen_range(-1.0..1.0));
            let b_in = DVector::from_fn(8, |_, _| rng.gen_range(0.1..1.0));
            let t = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let p = project_raw(&t, &a_eq, &b_eq, &a_in, &b_in).unwrap();
            let brute =
                crate::oracle::qp_project_brute_force(&t, &a_eq, &b_eq, &a_in, &b_in).unwrap();
            assert!(
                (&p.point - &brute).amax() < 1e-8,
                "active-set {:?} vs brute {:?}",
                p.point.as_slice(),
                brute.as_slice()
            );
        }
    }

    #[test]
    fn kkt_residuals_on_full_size_instances() {
        let basis = build_basis(50, 10.0, 10).unwrap();
        let bounds = BoxBounds::inscribed_in_circle([0.0, 0.0], 7.0);
        let set = assemble_constraints(
            [-3.0, -3.0, 0.5, 0.0, 0.0, 0.0],
            [3.0, 3.0, 0.5, 0.0, 0.0, 0.0],
            bounds,
            &basis,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let t = DVector::from_fn(22, |_, _| rng.gen_range(-6.0..6.0));
            let p = project(&t, &set).unwrap();
            let kkt = kkt_residuals(&t, &set.a_eq, &set.b_eq, &set.a, &set.b, &p);
            assert!(kkt.max() <= 1e-8, "kkt {:?}", kkt);
        }
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // x = 0 and x = 1 simultaneously
        let a_eq = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b_eq = DVector::from_vec(vec![0.0, 1.0]);
        let a_in = DMatrix::zeros(0, 1);
        let b_in = DVector::zeros(0);
        let t = DVector::from_vec(vec![0.5]);
        assert!(matches!(
            project_raw(&t, &a_eq, &b_eq, &a_in, &b_in),
            Err(Error::ProjectionInfeasible(_))
        ));
    }
}
