//! Dense convex QP with linear inequalities, solved by a primal active-set
//! method. Sized for the handful of decision variables of a condensed
//! short-horizon MPC.
//!
//! ```text
//! minimize   0.5 x' H x + f' x
//! subject to A x <= b,  lower <= x <= upper
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Maximum active-set iterations before reporting failure.
pub const MAX_ITERATIONS: usize = 100;
/// Floor enforced on the smallest Hessian eigenvalue.
pub const MIN_HESSIAN_EIGENVALUE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_upper: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Builds a problem, symmetrizing the Hessian and lifting its smallest
    /// eigenvalue to [`MIN_HESSIAN_EIGENVALUE`] when needed.
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraint_matrix: DMatrix<f64>,
        constraint_upper: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let n = linear.len();
        if hessian.shape() != (n, n) || lower.len() != n || upper.len() != n {
            return Err(Error::Config("QP dimensions do not match".into()));
        }
        if constraint_matrix.ncols() != n && constraint_matrix.nrows() > 0 {
            return Err(Error::Config("constraint matrix has wrong width".into()));
        }
        if constraint_matrix.nrows() != constraint_upper.len() {
            return Err(Error::Config("constraint bound length mismatch".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::Config("lower bound exceeds upper bound".into()));
        }
        let mut h = 0.5 * (&hessian + hessian.transpose());
        let min_eig = SymmetricEigen::new(h.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < MIN_HESSIAN_EIGENVALUE {
            let shift = MIN_HESSIAN_EIGENVALUE - min_eig;
            for i in 0..n {
                h[(i, i)] += shift;
            }
        }
        Ok(Self {
            hessian: h,
            linear,
            constraint_matrix,
            constraint_upper,
            lower,
            upper,
        })
    }

    /// Box-constrained problem without general rows.
    pub fn boxed(hessian: DMatrix<f64>, linear: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0), lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Unconstrained minimizer `-H^{-1} f`.
    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        let chol = self
            .hessian
            .clone()
            .cholesky()
            .expect("Hessian is positive definite after regularization");
        -chol.solve(&self.linear)
    }

    /// All inequalities stacked as rows `a_i x <= b_i`: general rows, then
    /// upper bounds, then lower bounds.
    fn stacked(&self) -> (Vec<DVector<f64>>, Vec<f64>) {
        let n = self.dim();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..self.constraint_matrix.nrows() {
            rows.push(self.constraint_matrix.row(i).transpose());
            rhs.push(self.constraint_upper[i]);
        }
        for i in 0..n {
            if self.upper[i].is_finite() {
                let mut a = DVector::zeros(n);
                a[i] = 1.0;
                rows.push(a);
                rhs.push(self.upper[i]);
            }
        }
        for i in 0..n {
            if self.lower[i].is_finite() {
                let mut a = DVector::zeros(n);
                a[i] = -1.0;
                rows.push(a);
                rhs.push(-self.lower[i]);
            }
        }
        (rows, rhs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers for the stacked inequalities (general, upper, lower).
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_infeasibility)
            .max(self.dual_infeasibility)
            .max(self.complementarity)
    }
}

/// KKT residuals of a candidate primal-dual pair, scaled relative to the
/// problem data so they are comparable across problem magnitudes.
pub fn kkt_residuals(problem: &QpProblem, solution: &QpSolution) -> KktResiduals {
    let (rows, rhs) = problem.stacked();
    let x = &solution.x;
    let mut grad = &problem.hessian * x + &problem.linear;
    let scale = 1.0 + problem.linear.amax() + (&problem.hessian * x).amax();
    let mut primal: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (i, (a, b)) in rows.iter().zip(&rhs).enumerate() {
        let lam = solution.multipliers.get(i).copied().unwrap_or(0.0);
        grad += a * lam;
        let slack = b - a.dot(x);
        let row_scale = 1.0 + b.abs() + a.amax() * x.amax();
        primal = primal.max((-slack).max(0.0) / row_scale);
        dual = dual.max((-lam).max(0.0) / scale);
        comp = comp.max((lam * slack).abs() / (scale * row_scale));
    }
    KktResiduals {
        stationarity: grad.amax() / scale,
        primal_infeasibility: primal,
        dual_infeasibility: dual,
        complementarity: comp,
    }
}

/// Solve from the projection of the origin onto the variable bounds, which
/// must also satisfy the general rows.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    let n = problem.dim();
    let x0 = DVector::from_fn(n, |i, _| 0.0f64.clamp(problem.lower[i], problem.upper[i]));
    solve_qp_from(problem, x0)
}

/// Primal active-set iterations from a feasible starting point.
pub fn solve_qp_from(problem: &QpProblem, x0: DVector<f64>) -> Result<QpSolution> {
    let n = problem.dim();
    let (rows, rhs) = problem.stacked();
    let m = rows.len();
    let feas_tol = 1e-9;
    for (a, b) in rows.iter().zip(&rhs) {
        let viol = a.dot(&x0) - b;
        if viol > feas_tol * (1.0 + b.abs()) {
            return Err(Error::Infeasible(format!(
                "starting point violates a constraint by {viol:e}"
            )));
        }
    }

    let h = &problem.hessian;
    let f = &problem.linear;
    let mut x = x0;
    let mut working: Vec<usize> = Vec::new();
    let h_scale = h.amax().max(f64::MIN_POSITIVE);

    for iteration in 1..=MAX_ITERATIONS {
        let g = h * &x + f;
        let k = working.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (j, &w) in working.iter().enumerate() {
            for c in 0..n {
                // constraint rows scaled by the Hessian magnitude for conditioning
                kkt[(n + j, c)] = rows[w][c] * h_scale;
                kkt[(c, n + j)] = rows[w][c] * h_scale;
            }
        }
        let mut rhs_vec = DVector::zeros(n + k);
        rhs_vec.rows_mut(0, n).copy_from(&(-&g));
        let sol = kkt
            .lu()
            .solve(&rhs_vec)
            .ok_or(Error::SolverFailure { iterations: iteration })?;
        let mut p = sol.rows(0, n).into_owned();
        if k > 0 {
            // remove round-off components that would leave the working set
            let aw = DMatrix::from_fn(k, n, |j, c| rows[working[j]][c]);
            let gram = &aw * aw.transpose();
            if let Some(coef) = gram.lu().solve(&(&aw * &p)) {
                p -= aw.transpose() * coef;
            }
        }
        let mu: Vec<f64> = (0..k).map(|j| sol[n + j] * h_scale).collect();

        let step_tol = 1e-12 * (1.0 + x.amax());
        if p.amax() <= step_tol {
            // stationary on the working set; check multiplier signs
            let (worst, worst_mu) = mu
                .iter()
                .enumerate()
                .fold((None, 0.0), |acc, (j, &v)| if v < acc.1 { (Some(j), v) } else { acc });
            let dual_tol = 1e-12 * (1.0 + g.amax());
            match worst {
                Some(j) if worst_mu < -dual_tol => {
                    working.remove(j);
                }
                _ => {
                    let mut multipliers = vec![0.0; m];
                    for (j, &w) in working.iter().enumerate() {
                        multipliers[w] = mu[j].max(0.0);
                    }
                    let objective = problem.objective(&x);
                    return Ok(QpSolution {
                        x,
                        multipliers,
                        iterations: iteration,
                        objective,
                    });
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..m {
                if working.contains(&i) {
                    continue;
                }
                let ap = rows[i].dot(&p);
                if ap > 1e-14 * (1.0 + p.amax()) {
                    let t = ((rhs[i] - rows[i].dot(&x)) / ap).max(0.0);
                    if t < alpha {
                        alpha = t;
                        blocking = Some(i);
                    }
                }
            }
            x += alpha * &p;
            if let Some(i) = blocking {
                // land exactly on the blocking constraint
                let a = &rows[i];
                let gap = rhs[i] - a.dot(&x);
                x += a * (gap / a.norm_squared());
                working.push(i);
            }
        }
    }
    Err(Error::SolverFailure {
        iterations: MAX_ITERATIONS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    }

    /// Accelerated projected gradient run to convergence; independent of the
    /// active-set path.
    fn projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
        let lmax = SymmetricEigen::new(h.clone()).eigenvalues.amax();
        let step = 1.0 / lmax;
        let project = |v: DVector<f64>| DVector::from_fn(v.len(), |i, _| v[i].clamp(lo[i], hi[i]));
        let mut x = project(DVector::zeros(f.len()));
        let mut y = x.clone();
        let mut t = 1.0f64;
        let objective = |v: &DVector<f64>| 0.5 * v.dot(&(h * v)) + f.dot(v);
        for _ in 0..100_000 {
            let g = h * &y + f;
            let next = project(&y - step * g);
            if objective(&next) > objective(&x) {
                // restart momentum
                y = x.clone();
                t = 1.0;
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (t - 1.0) / t_next * (&next - &x);
            x = next;
            t = t_next;
        }
        x
    }

    #[test]
    fn inactive_constraints_give_unconstrained_solution() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![-1.0, 0.3]);
        let big = DVector::from_element(2, 1e3);
        let qp = QpProblem::boxed(h, f, -&big, big.clone()).unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!((&sol.x - qp.unconstrained_minimizer()).amax() < 1e-8);
    }

    #[test]
    fn scalar_active_upper_bound() {
        let qp = QpProblem::boxed(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -5.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert_eq!(sol.x[0], 2.0);
        assert!(sol.multipliers.iter().any(|&l| (l - 3.0).abs() < 1e-9));
    }

    #[test]
    fn random_box_qps_match_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = 5;
            let h = random_spd(&mut rng, n);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let lo = DVector::from_fn(n, |_, _| rng.random_range(-1.0..0.0));
            let hi = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
            let qp = QpProblem::boxed(h.clone(), f.clone(), lo.clone(), hi.clone()).unwrap();
            let sol = solve_qp(&qp).unwrap();
            let reference = projected_gradient(&h, &f, &lo, &hi);
            let diff = (sol.objective - qp.objective(&reference)).abs();
            assert!(diff < 1e-6, "objective gap {diff}: {} vs {} x={} ref={}", sol.objective, qp.objective(&reference), sol.x, reference);
            assert!(kkt_residuals(&qp, &sol).max() < 1e-6);
        }
    }

    #[test]
    fn general_rows_are_respected() {
        // cumulative-sum style constraints as in the MPC
        let h = DMatrix::identity(3, 3);
        let f = DVector::from_vec(vec![-10.0, -10.0, -10.0]);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_element(3, 4.0);
        let qp = QpProblem::new(
            h,
            f,
            a.clone(),
            b,
            DVector::from_element(3, -3.0),
            DVector::from_element(3, 3.0),
        )
        .unwrap();
        let sol = solve_qp(&qp).unwrap();
        let ax = &a * &sol.x;
        assert!(ax.iter().all(|&v| v <= 4.0 + 1e-9));
        assert!(kkt_residuals(&qp, &sol).max() < 1e-6);
    }

    #[test]
    fn infeasible_start_is_reported() {
        let qp = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, -5.0),
            DVector::from_element(1, 5.0),
        )
        .unwrap();
        assert!(matches!(solve_qp(&qp), Err(Error::Infeasible(_))));
        let sol = solve_qp_from(&qp, DVector::from_element(1, 2.0)).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_is_regularized() {
        let qp = QpProblem::boxed(
            DMatrix::zeros(2, 2),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_element(2, -1.0),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let min_eig = SymmetricEigen::new(qp.hessian.clone()).eigenvalues.min();
        assert!(min_eig >= MIN_HESSIAN_EIGENVALUE * 0.999);
        let sol = solve_qp(&qp).unwrap();
        assert!((sol.x[0] + 1.0).abs() < 1e-9 && (sol.x[1] - 1.0).abs() < 1e-9, "{sol:?}");
    }
}
