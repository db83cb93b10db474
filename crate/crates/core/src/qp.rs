//! Dense convex QP solver.
//!
//! ```text
//! minimize    ½ pᵀHp + gᵀp
//! subject to  A_eq p  = b_eq
//!             A_in p ≤ b_in
//! ```
//!
//! Dual active-set method of Goldfarb and Idnani: start from the
//! unconstrained minimizer, add the most violated constraint (lowest index on
//! ties), and take primal/dual steps that keep the iterate optimal for the
//! current working set. The factorization `Jᵀ·N = [R; 0]` with `J = L⁻ᵀ·Q`
//! is maintained with Givens rotations, so each working-set change costs
//! O(n²).
//!
//! Multipliers follow `Hp + g + A_eqᵀν + A_inᵀμ = 0`, `μ ≥ 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("QP working-set iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone, Copy)]
pub struct QpProblem<'a> {
    pub hessian: &'a DMatrix<f64>,
    pub gradient: &'a DVector<f64>,
    pub eq_matrix: &'a DMatrix<f64>,
    pub eq_rhs: &'a DVector<f64>,
    pub ineq_matrix: &'a DMatrix<f64>,
    pub ineq_rhs: &'a DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub step: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    /// Inequality indices in the final working set.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Working-set entry: equality or inequality index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Eq(usize),
    Ineq(usize),
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    active: Vec<Row>,
    mult: Vec<f64>,
}

impl Factor {
    fn q(&self) -> usize {
        self.active.len()
    }

    /// `(d, z, r)`: `d = Jᵀn`, primal direction `z`, dual direction `r`.
    fn directions(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let q = self.q();
        let d = self.j.tr_mul(normal);
        let mut z = DVector::zeros(self.n);
        for k in q..self.n {
            if d[k] != 0.0 {
                z.axpy(d[k], &self.j.column(k), 1.0);
            }
        }
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        (d, z, r)
    }

    fn add(&mut self, mut d: DVector<f64>, row: Row, mult: f64) {
        let q = self.q();
        for k in (q + 1..self.n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let h = d[k - 1].hypot(d[k]);
            let (c, s) = (d[k - 1] / h, d[k] / h);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(row);
        self.mult.push(mult);
    }

    fn drop(&mut self, pos: usize) {
        let q = self.q();
        for col in pos..q - 1 {
            for i in 0..=col + 1 {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for k in pos..q - 1 {
            let (a, b) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for col in k..q - 1 {
                let (x, y) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * x + s * y;
                self.r[(k + 1, col)] = -s * x + c * y;
            }
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
        for col in 0..q {
            self.r[(q - 1, col)] = 0.0;
        }
        self.active.remove(pos);
        self.mult.remove(pos);
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, a)], m[(i, b)]);
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

/// Solves the QP. `H` must be symmetric positive definite.
pub fn solve_qp(p: &QpProblem<'_>) -> Result<QpSolution, QpError> {
    let n = p.gradient.len();
    let me = p.eq_matrix.nrows();
    let mi = p.ineq_matrix.nrows();
    debug_assert_eq!(p.hessian.shape(), (n, n));
    debug_assert!(me == 0 || p.eq_matrix.ncols() == n);
    debug_assert!(mi == 0 || p.ineq_matrix.ncols() == n);

    let chol = p.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut x = -chol.solve(p.gradient);
    // J = L⁻ᵀ
    let l = chol.l();
    let j = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let mut f = Factor {
        n,
        j,
        r: DMatrix::zeros(n, n),
        active: Vec::new(),
        mult: Vec::new(),
    };

    let eq_rows: Vec<DVector<f64>> = (0..me).map(|i| p.eq_matrix.row(i).transpose()).collect();
    // inequalities as nᵀp ≥ b' with n = −a, b' = −b
    let in_rows: Vec<DVector<f64>> = (0..mi).map(|i| -p.ineq_matrix.row(i).transpose()).collect();
    let in_norms: Vec<f64> = in_rows.iter().map(|r| r.amax()).collect();

    for (e, normal) in eq_rows.iter().enumerate() {
        let (d, z, r) = f.directions(normal);
        let slack = normal.dot(&x) - p.eq_rhs[e];
        let zn = z.dot(normal);
        let scale = d.norm().max(f64::MIN_POSITIVE);
        if z.norm() * normal.norm() <= 1e-12 * scale * scale.max(1.0) || zn.abs() <= 1e-14 * scale * scale {
            // dependent on earlier equalities
            let tol = 1e-9 * (1.0 + p.eq_rhs[e].abs());
            if slack.abs() <= tol {
                continue;
            }
            return Err(QpError::Infeasible);
        }
        let t = -slack / zn;
        x.axpy(t, &z, 1.0);
        for (u, ri) in f.mult.iter_mut().zip(r.iter()) {
            *u -= t * ri;
        }
        f.add(d, Row::Eq(e), t);
    }

    let max_iter = 10 * (n + me + mi) + 100;
    let mut iterations = 0;
    let mut in_set = vec![false; mi];
    loop {
        // most violated inactive inequality, lowest index on ties
        let mut chosen: Option<(usize, f64)> = None;
        for k in 0..mi {
            if in_set[k] {
                continue;
            }
            let s = in_rows[k].dot(&x) + p.ineq_rhs[k];
            let tol = 1e-11 * (1.0 + p.ineq_rhs[k].abs() + in_norms[k] * x.amax());
            if s < -tol && chosen.is_none_or(|(_, best)| s < best) {
                chosen = Some((k, s));
            }
        }
        let Some((k, _)) = chosen else { break };
        let normal = &in_rows[k];
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let (d, z, r) = f.directions(normal);
            // partial step: largest dual step keeping active inequality multipliers ≥ 0
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (pos, (row, ri)) in f.active.iter().zip(r.iter()).enumerate() {
                if let Row::Ineq(_) = row {
                    if *ri > 0.0 {
                        let ratio = f.mult[pos] / ri;
                        if ratio < t1 {
                            t1 = ratio;
                            drop_at = Some(pos);
                        }
                    }
                }
            }
            let zn = z.dot(normal);
            let dn = d.norm();
            let t2 = if zn <= 1e-14 * dn * dn {
                f64::INFINITY
            } else {
                -(normal.dot(&x) + p.ineq_rhs[k]) / zn
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            for (u, ri) in f.mult.iter_mut().zip(r.iter()) {
                *u -= t * ri;
            }
            u_plus += t;
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            if t2 <= t1 {
                f.add(d, Row::Ineq(k), u_plus);
                in_set[k] = true;
                break;
            }
            let pos = drop_at.expect("partial step has a blocking constraint");
            if let Row::Ineq(idx) = f.active[pos] {
                in_set[idx] = false;
            }
            f.drop(pos);
        }
    }

    let mut eq_multipliers = DVector::zeros(me);
    let mut ineq_multipliers = DVector::zeros(mi);
    let mut active = Vec::new();
    for (row, u) in f.active.iter().zip(&f.mult) {
        match *row {
            Row::Eq(e) => eq_multipliers[e] = -u,
            Row::Ineq(k) => {
                ineq_multipliers[k] = u.max(0.0);
                active.push(k);
            }
        }
    }
    active.sort_unstable();
    let mut sol = QpSolution {
        step: x,
        eq_multipliers,
        ineq_multipliers,
        active,
        iterations,
    };
    polish(p, &f.active, &mut sol);
    Ok(sol)
}

fn max_violation(p: &QpProblem<'_>, x: &DVector<f64>) -> f64 {
    let eq = (p.eq_matrix * x - p.eq_rhs).amax();
    let ineq = (p.ineq_matrix * x - p.ineq_rhs).iter().fold(0.0f64, |m, v| m.max(*v));
    eq.max(ineq)
}

/// Re-solves the KKT system of the final working set directly. The updates
/// along the way accumulate rounding in the active residuals; one dense solve
/// removes it. Kept only if it is no less feasible and dual feasible.
fn polish(p: &QpProblem<'_>, working: &[Row], sol: &mut QpSolution) {
    let n = sol.step.len();
    let q = working.len();
    if q == 0 {
        return;
    }
    let mut kkt = DMatrix::zeros(n + q, n + q);
    kkt.view_mut((0, 0), (n, n)).copy_from(p.hessian);
    let mut rhs = DVector::zeros(n + q);
    rhs.rows_mut(0, n).copy_from(&(-p.gradient));
    for (i, row) in working.iter().enumerate() {
        let (a, b) = match *row {
            Row::Eq(e) => (p.eq_matrix.row(e), p.eq_rhs[e]),
            Row::Ineq(k) => (p.ineq_matrix.row(k), p.ineq_rhs[k]),
        };
        kkt.view_mut((n + i, 0), (1, n)).copy_from(&a);
        kkt.view_mut((0, n + i), (n, 1)).copy_from(&a.transpose());
        rhs[n + i] = b;
    }
    let Some(z) = kkt.lu().solve(&rhs) else { return };
    let x = z.rows(0, n).into_owned();
    if !x.iter().all(|v| v.is_finite()) {
        return;
    }
    let lam = z.rows(n, q);
    let scale = 1.0 + lam.amax();
    if working
        .iter()
        .zip(lam.iter())
        .any(|(row, l)| matches!(row, Row::Ineq(_)) && *l < -1e-9 * scale)
    {
        return;
    }
    if max_violation(p, &x) > max_violation(p, &sol.step) {
        return;
    }
    sol.step = x;
    for (row, l) in working.iter().zip(lam.iter()) {
        match *row {
            Row::Eq(e) => sol.eq_multipliers[e] = *l,
            Row::Ineq(k) => sol.ineq_multipliers[k] = l.max(0.0),
        }
    }
}
