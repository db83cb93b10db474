//! Sequential quadratic programming for smooth costs under linear constraints.
//!
//! Each iteration solves a QP with a damped-BFGS model Hessian, then
//! backtracks along the step on the ℓ1 merit `f + μ·‖violation‖₁`. The
//! Hessian starts from the exact second derivative of the quadratic cost
//! terms plus a small diagonal shift; BFGS adds the curvature of the rest.
//! Constraints are linear, so the QP linearization is exact.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::blocking::BlockingSchedule;
use crate::ocp::{LinearConstraints, OcpProblem};
use crate::qp::{solve_qp, QpError, QpProblem};

/// A smooth program with linear constraints.
pub trait Nlp {
    fn dim(&self) -> usize;
    fn cost_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>);
    fn constraints(&self) -> &LinearConstraints;
    /// Positive semidefinite starting Hessian.
    fn initial_hessian(&self) -> DMatrix<f64>;
}

impl Nlp for OcpProblem {
    fn dim(&self) -> usize {
        OcpProblem::dim(self)
    }

    fn cost_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        OcpProblem::cost_and_gradient(self, z)
    }

    fn constraints(&self) -> &LinearConstraints {
        self.linear_constraints()
    }

    fn initial_hessian(&self) -> DMatrix<f64> {
        self.quadratic_hessian()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub merit_penalty_init: f64,
    /// Step shrink factor during backtracking.
    pub backtrack: f64,
    /// Armijo sufficient-decrease fraction.
    pub armijo: f64,
    pub min_step: f64,
    /// Diagonal shift added to the starting Hessian.
    pub hessian_shift: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-6,
            max_iter: 100,
            merit_penalty_init: 10.0,
            backtrack: 0.5,
            armijo: 1e-4,
            min_step: 1e-10,
            hessian_shift: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolverStatus {
    Converged,
    MaxIter,
    InfeasibleQp,
    LineSearchFailure,
}

impl SolverStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
            Self::InfeasibleQp => "infeasible_qp",
            Self::LineSearchFailure => "line_search_failure",
        }
    }
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub z: DVector<f64>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// QP subproblems solved.
    pub iterations: usize,
    pub wall_time: Duration,
    pub status: SolverStatus,
    /// Merit at each iterate, each value under the penalty used for the step
    /// that left it.
    pub merit_trace: Vec<f64>,
}

impl SolverResult {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

/// Largest of stationarity, primal violation and complementarity, all ∞-norms.
pub fn kkt_residual(
    grad: &DVector<f64>,
    cons: &LinearConstraints,
    z: &DVector<f64>,
    eq_mult: &DVector<f64>,
    ineq_mult: &DVector<f64>,
) -> f64 {
    let stat = grad + cons.eq_matrix.tr_mul(eq_mult) + cons.ineq_matrix.tr_mul(ineq_mult);
    let c = cons.eval(z);
    let comp = c
        .inequalities
        .iter()
        .zip(ineq_mult.iter())
        .fold(0.0f64, |m, (g, mu)| m.max((g * mu).abs()));
    stat.amax().max(c.max_violation()).max(comp)
}

/// ℓ1 constraint violation, ignoring residuals below the rounding error of
/// their own evaluation.
fn l1_violation(cons: &LinearConstraints, z: &DVector<f64>) -> f64 {
    const ROUNDING: f64 = 1e3 * f64::EPSILON;
    let floor = |a: &DMatrix<f64>, b: f64, i: usize| {
        let mag: f64 = a.row(i).iter().zip(z.iter()).map(|(x, y)| (x * y).abs()).sum();
        ROUNDING * (mag + b.abs())
    };
    let c = cons.eval(z);
    let eq: f64 = (0..c.equalities.len())
        .map(|i| {
            let v = c.equalities[i].abs();
            if v > floor(&cons.eq_matrix, cons.eq_rhs[i], i) {
                v
            } else {
                0.0
            }
        })
        .sum();
    let ineq: f64 = (0..c.inequalities.len())
        .map(|i| {
            let v = c.inequalities[i];
            if v > floor(&cons.ineq_matrix, cons.ineq_rhs[i], i) {
                v
            } else {
                0.0
            }
        })
        .sum();
    eq + ineq
}

/// Powell-damped BFGS update; keeps `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= f64::EPSILON * s.norm_squared() {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    b.ger(1.0 / sr, &r, &r, 1.0);
    // restore exact symmetry lost to rounding
    let n = b.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
}

/// Solves the program from `z0`.
pub fn solve<P: Nlp + ?Sized>(problem: &P, options: &SolverOptions, z0: &DVector<f64>) -> SolverResult {
    let start = Instant::now();
    let cons = problem.constraints();
    let n = problem.dim();
    assert_eq!(z0.len(), n, "initial guess dimension");

    let mut b = problem.initial_hessian();
    for i in 0..n {
        b[(i, i)] += options.hessian_shift;
    }
    let mut z = z0.clone();
    let (mut f, mut g) = problem.cost_and_gradient(&z);
    let mut penalty = options.merit_penalty_init;
    let mut eq_mult = DVector::zeros(cons.eq_matrix.nrows());
    let mut ineq_mult = DVector::zeros(cons.ineq_matrix.nrows());
    let mut kkt = f64::INFINITY;
    let mut merit_trace = Vec::new();
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIter;

    while iterations < options.max_iter {
        iterations += 1;
        let c = cons.eval(&z);
        let eq_rhs = -&c.equalities;
        let ineq_rhs = -&c.inequalities;
        let qp = QpProblem {
            hessian: &b,
            gradient: &g,
            eq_matrix: &cons.eq_matrix,
            eq_rhs: &eq_rhs,
            ineq_matrix: &cons.ineq_matrix,
            ineq_rhs: &ineq_rhs,
        };
        let sol = match solve_qp(&qp) {
            Ok(s) => s,
            Err(QpError::Infeasible) => {
                status = SolverStatus::InfeasibleQp;
                break;
            }
            Err(_) => {
                status = SolverStatus::InfeasibleQp;
                break;
            }
        };
        eq_mult = sol.eq_multipliers;
        ineq_mult = sol.ineq_multipliers;
        kkt = kkt_residual(&g, cons, &z, &eq_mult, &ineq_mult);
        if kkt <= options.kkt_tol {
            status = SolverStatus::Converged;
            break;
        }

        let mult_max = eq_mult.amax().max(ineq_mult.amax());
        penalty = penalty.max(1.1 * mult_max);
        let p = sol.step;
        let viol = l1_violation(cons, &z);
        let merit = f + penalty * viol;
        merit_trace.push(merit);
        let slope = g.dot(&p) - penalty * viol;

        let mut alpha = 1.0;
        let accepted = loop {
            let trial = &z + &p * alpha;
            let (ft, gt) = problem.cost_and_gradient(&trial);
            let mt = ft + penalty * l1_violation(cons, &trial);
            // relaxed by the rounding level of the merit itself
            if mt - merit - 10.0 * f64::EPSILON * merit.abs() <= options.armijo * alpha * slope {
                break Some((trial, ft, gt));
            }
            alpha *= options.backtrack;
            if alpha < options.min_step {
                break None;
            }
        };
        let Some((z_new, f_new, g_new)) = accepted else {
            status = SolverStatus::LineSearchFailure;
            break;
        };
        let s = &z_new - &z;
        let y = &g_new - &g;
        damped_bfgs(&mut b, &s, &y);
        z = z_new;
        f = f_new;
        g = g_new;
    }

    if status != SolverStatus::Converged {
        kkt = kkt_residual(&g, cons, &z, &eq_mult, &ineq_mult);
    }
    merit_trace.push(f + penalty * l1_violation(cons, &z));
    SolverResult {
        max_violation: cons.eval(&z).max_violation(),
        z,
        cost: f,
        kkt_residual: kkt,
        eq_multipliers: eq_mult,
        ineq_multipliers: ineq_mult,
        iterations,
        wall_time: start.elapsed(),
        status,
        merit_trace,
    }
}

/// Initial guess for the next receding-horizon problem.
///
/// Shifts the reduced rate blocks by one, repeats the last block and zeroes
/// the slacks. Falls back to all zeros when the schedule changed.
pub fn warm_start(previous: &DVector<f64>, previous_schedule: &BlockingSchedule, problem: &OcpProblem) -> DVector<f64> {
    let l = problem.layout();
    let mut z = DVector::zeros(l.dim());
    if previous_schedule != problem.schedule() || previous.len() != l.dim() || l.blocks == 0 {
        return z;
    }
    for i in 0..l.blocks {
        let from = (i + 1).min(l.blocks - 1);
        z.rows_mut(l.rate_index(i, 0), l.inputs)
            .copy_from(&previous.rows(l.rate_index(from, 0), l.inputs));
    }
    z
}
