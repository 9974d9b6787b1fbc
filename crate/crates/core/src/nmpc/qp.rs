//! Dense strictly-convex QP with variable boxes and general inequality rows,
//! solved by a primal active-set sweep:
//!
//!   min ½ xᵀHx + gᵀx   s.t.  lb ≤ x ≤ ub,  aᵢᵀx ≤ bᵢ
//!
//! H is fixed across working-set changes, so it is factored once and each
//! iteration solves only the m×m Schur system A_w H⁻¹ A_wᵀ of the working
//! set (this runs inside a 100 Hz control loop). The dual block carries a
//! tiny negative regularization so linearly dependent working sets (a
//! velocity row meeting the input boxes it is built from) stay solvable;
//! in Schur form that is S + εI.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// General rows aᵀx ≤ b.
    pub rows_a: Vec<DVector<f64>>,
    pub rows_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Con {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// Infinity norm of the working-set stationarity residual.
    pub stationarity: f64,
    pub converged: bool,
}

const ZERO_TOL: f64 = 1e-11;
/// Steps below this are Schur-regularization noise (the εI dual shift leaks
/// ~ε·|λ| into d), not real descent directions. Ill-conditioned working sets
/// can leak more; the subspace-minimum flag covers that case.
const STEP_TOL: f64 = 1e-9;
const LAMBDA_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 500;

impl DenseQp {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    /// Constraint value in "≤ 0" convention.
    fn con_value(&self, c: Con, x: &DVector<f64>) -> f64 {
        match c {
            Con::Lower(i) => self.lb[i] - x[i],
            Con::Upper(i) => x[i] - self.ub[i],
            Con::Row(j) => self.rows_a[j].dot(x) - self.rows_b[j],
        }
    }

    fn all_constraints(&self) -> Vec<Con> {
        let mut cs = Vec::new();
        for i in 0..self.n() {
            if self.lb[i].is_finite() {
                cs.push(Con::Lower(i));
            }
            if self.ub[i].is_finite() {
                cs.push(Con::Upper(i));
            }
        }
        for j in 0..self.rows_a.len() {
            cs.push(Con::Row(j));
        }
        cs
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.h * x)[(0, 0)] + self.g.dot(x)
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.all_constraints()
            .iter()
            .map(|&c| self.con_value(c, x))
            .fold(0.0f64, f64::max)
    }
}

/// aᵀv without materializing box-constraint gradients.
fn a_dot(qp: &DenseQp, c: Con, v: &DVector<f64>) -> f64 {
    match c {
        Con::Lower(i) => -v[i],
        Con::Upper(i) => v[i],
        Con::Row(j) => qp.rows_a[j].dot(v),
    }
}

/// Primal active-set method. `x0` must be feasible.
pub fn solve_qp(qp: &DenseQp, x0: DVector<f64>) -> QpSolution {
    let mut x = x0;
    debug_assert!(
        qp.max_violation(&x) < 1e-6,
        "infeasible start: violation {}",
        qp.max_violation(&x)
    );
    let hinv = match qp.h.clone().cholesky() {
        Some(chol) => chol.inverse(),
        // Strict convexity is the caller's contract; a general symmetric
        // fallback keeps slightly indefinite inputs from panicking.
        None => match qp.h.clone().try_inverse() {
            Some(inv) => inv,
            None => {
                return QpSolution {
                    x,
                    iterations: 0,
                    stationarity: f64::INFINITY,
                    converged: false,
                }
            }
        },
    };
    let all = qp.all_constraints();
    // H⁻¹aᵢ per constraint, shared by every Schur system below.
    let vs: Vec<DVector<f64>> = all
        .iter()
        .map(|&c| match c {
            Con::Lower(i) => -hinv.column(i),
            Con::Upper(i) => hinv.column(i).into_owned(),
            Con::Row(j) => &hinv * &qp.rows_a[j],
        })
        .collect();

    // Seed the working set (indices into `all`) with constraints active at
    // the start point.
    let mut working: Vec<usize> = (0..all.len())
        .filter(|&k| qp.con_value(all[k], &x) > -ZERO_TOL)
        .collect();

    let mut stationarity = f64::INFINITY;
    // Set after an unblocked full step: that is the exact minimizer over the
    // working set, so the next pass must do the multiplier check rather than
    // re-measure the (regularization-noise) step.
    let mut at_subspace_min = false;
    for iter in 0..MAX_ITERS {
        // Equality-constrained step over { d : A_w d = 0 }:
        //   (S + εI) λ = −A_w H⁻¹ grad,  d = −H⁻¹grad − Σ λ_r H⁻¹a_r.
        let grad = &qp.h * &x + &qp.g;
        let w = &hinv * &grad;
        let m = working.len();
        let mut s = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (r, &kr) in working.iter().enumerate() {
            for (c, &kc) in working.iter().enumerate().take(r + 1) {
                let v = a_dot(qp, all[kr], &vs[kc]);
                s[(r, c)] = v;
                s[(c, r)] = v;
            }
            s[(r, r)] += 1e-12;
            rhs[r] = -a_dot(qp, all[kr], &w);
        }
        let lambda = if m == 0 {
            rhs
        } else {
            s.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m))
        };
        let mut d = -w.clone();
        let mut stat = grad.clone();
        for (r, &kr) in working.iter().enumerate() {
            d.axpy(-lambda[r], &vs[kr], 1.0);
            match all[kr] {
                Con::Lower(i) => stat[i] -= lambda[r],
                Con::Upper(i) => stat[i] += lambda[r],
                Con::Row(j) => stat.axpy(lambda[r], &qp.rows_a[j], 1.0),
            }
        }
        stationarity = stat.amax();

        if at_subspace_min || d.amax() < STEP_TOL {
            // Optimal over the working set; check multiplier signs.
            at_subspace_min = false;
            let mut worst = -LAMBDA_TOL;
            let mut drop_idx = None;
            for (r, &l) in lambda.iter().enumerate() {
                if l < worst {
                    worst = l;
                    drop_idx = Some(r);
                }
            }
            match drop_idx {
                Some(r) => {
                    working.remove(r);
                }
                None => {
                    return QpSolution { x, iterations: iter, stationarity, converged: true };
                }
            }
        } else {
            // Ratio test against constraints outside the working set.
            let mut alpha = 1.0f64;
            let mut blocker = None;
            for (k, &c) in all.iter().enumerate() {
                if working.contains(&k) {
                    continue;
                }
                let ad = a_dot(qp, c, &d);
                if ad > ZERO_TOL {
                    let room = -qp.con_value(c, &x);
                    let t = (room / ad).max(0.0);
                    if t < alpha {
                        alpha = t;
                        blocker = Some(k);
                    }
                }
            }
            x += d * alpha;
            match blocker {
                Some(k) => working.push(k),
                // An unblocked step is the full Newton step onto the
                // working-set minimizer; recomputing d there only measures
                // regularization noise.
                None => at_subspace_min = true,
            }
        }
    }
    QpSolution { x, iterations: MAX_ITERS, stationarity, converged: false }
}
