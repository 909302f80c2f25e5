//! Small dense strictly convex QP: solve and differentiate.
//!
//! Problem form:
//!
//! ```text
//! minimize   u' H u + F' u
//! subject to G u <= h,  lb <= u <= ub
//! ```
//!
//! There is no 1/2 in front of the quadratic term, so the Hessian of the
//! objective is `H + H'` (that is `2H` for symmetric `H`). The solver is a dual
//! active-set method in the style of Goldfarb and Idnani: it starts from the
//! unconstrained minimizer and adds violated constraints one at a time while
//! keeping the multipliers of the working set nonnegative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Multipliers and slacks at or below this are treated as zero in the backward pass.
pub const DEGENERACY_TOL: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QPError {
    #[error("ill-conditioned or indefinite objective (condition number {0:e})")]
    Numerical(f64),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("KKT system is singular")]
    SingularKKT,
    #[error("solution status is not optimal")]
    NotOptimal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPSpec {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QPSpec {
    /// Unbounded box, no inequality rows.
    pub fn unconstrained(hess: DMatrix<f64>, lin: DVector<f64>) -> Self {
        let n = lin.len();
        Self {
            hess,
            lin,
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n(&self) -> usize {
        self.lin.len()
    }

    pub fn m(&self) -> usize {
        self.h.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.hess * u)[(0, 0)] + self.lin.dot(u)
    }

    pub fn validate(&self) -> Result<(), QPError> {
        let n = self.n();
        if self.hess.shape() != (n, n) {
            return Err(QPError::Shape(format!("H is {:?}, expected {n}x{n}", self.hess.shape())));
        }
        if self.g.ncols() != n || self.g.nrows() != self.m() {
            return Err(QPError::Shape(format!("G is {:?}", self.g.shape())));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(QPError::Shape("bounds".into()));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| l > u) {
            return Err(QPError::Shape("lb > ub".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QPStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPSolution {
    pub primal: DVector<f64>,
    /// Multipliers of the `G u <= h` rows.
    pub dual: DVector<f64>,
    pub dual_lb: DVector<f64>,
    pub dual_ub: DVector<f64>,
    /// Indices of active `G` rows.
    pub active_set: Vec<usize>,
    pub status: QPStatus,
    pub iterations: usize,
    /// For infeasible problems: nonnegative weights `w` over the rows
    /// (G rows, then upper bounds, then lower bounds) with `sum w_i a_i = 0`
    /// and `sum w_i b_i < 0`.
    pub farkas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowKind {
    G(usize),
    Upper(usize),
    Lower(usize),
}

struct Row {
    kind: RowKind,
    a: DVector<f64>,
    b: f64,
    scale: f64,
}

fn build_rows(spec: &QPSpec) -> Vec<Row> {
    let n = spec.n();
    let mut rows = Vec::new();
    for i in 0..spec.m() {
        let a = spec.g.row(i).transpose();
        let s = a.norm();
        rows.push(Row { kind: RowKind::G(i), a, b: spec.h[i], scale: s });
    }
    for j in 0..n {
        if spec.ub[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            rows.push(Row { kind: RowKind::Upper(j), a, b: spec.ub[j], scale: 1.0 });
        }
    }
    for j in 0..n {
        if spec.lb[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = -1.0;
            rows.push(Row { kind: RowKind::Lower(j), a, b: -spec.lb[j], scale: 1.0 });
        }
    }
    // Normalize so tolerances are scale free.
    for r in rows.iter_mut() {
        if r.scale > 0.0 {
            r.a /= r.scale;
            r.b /= r.scale;
        }
    }
    rows
}

/// Symmetrized Hessian of the objective (`H + H'`) after the conditioning check,
/// with its smallest eigenvalue.
fn objective_hessian(spec: &QPSpec) -> Result<(DMatrix<f64>, f64), QPError> {
    let q = &spec.hess + spec.hess.transpose();
    let eig = q.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &e in eig.eigenvalues.iter() {
        lo = lo.min(e);
        hi = hi.max(e.abs());
    }
    if !(lo > 0.0) || !lo.is_finite() || hi / lo > MAX_CONDITION {
        return Err(QPError::Numerical(if lo > 0.0 { hi / lo } else { f64::INFINITY }));
    }
    Ok((q, lo))
}

/// Solve `[Q N; N' 0] [x; y] = [r1; r2]`. Returns `None` when singular.
fn solve_kkt(q: &DMatrix<f64>, nmat: &DMatrix<f64>, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = q.nrows();
    let k = nmat.ncols();
    let mut m = DMatrix::zeros(n + k, n + k);
    m.view_mut((0, 0), (n, n)).copy_from(q);
    m.view_mut((0, n), (n, k)).copy_from(nmat);
    m.view_mut((n, 0), (k, n)).copy_from(&nmat.transpose());
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(r1);
    rhs.rows_mut(n, k).copy_from(r2);
    let lu = m.full_piv_lu();
    let d = lu.u().diagonal();
    let big = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let small = d.iter().fold(f64::INFINITY, |a, x| a.min(x.abs()));
    if !(small > 1e-13 * big.max(1.0)) {
        return None;
    }
    let x = lu.solve(&rhs)?;
    Some((x.rows(0, n).into_owned(), x.rows(n, k).into_owned()))
}

/// Whether adding row `p` keeps the working-set KKT matrix nonsingular; a
/// small `a_p . z` alone can be roundoff when the set is ill conditioned.
fn independent(q: &DMatrix<f64>, rows: &[Row], active: &[usize], p: usize, n: usize) -> bool {
    let mut idx = active.to_vec();
    idx.push(p);
    solve_kkt(q, &normals(rows, &idx, n), &DVector::zeros(n), &DVector::zeros(idx.len())).is_some()
}

fn normals(rows: &[Row], idx: &[usize], n: usize) -> DMatrix<f64> {
    let mut nm = DMatrix::zeros(n, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        nm.set_column(c, &rows[i].a);
    }
    nm
}

pub fn solve(spec: &QPSpec) -> Result<QPSolution, QPError> {
    solve_with_limit(spec, 0)
}

/// `max_iter = 0` selects a size-based default.
pub fn solve_with_limit(spec: &QPSpec, max_iter: usize) -> Result<QPSolution, QPError> {
    spec.validate()?;
    let n = spec.n();
    let (q, eig_min) = objective_hessian(spec)?;
    let dep_tol = 1e-12 / eig_min;
    let chol = q.clone().cholesky().ok_or(QPError::Numerical(f64::INFINITY))?;
    let rows = build_rows(spec);
    let nr = rows.len();
    let max_iter = if max_iter == 0 { 50 * (n + nr) + 100 } else { max_iter };
    let tol = 1e-12;

    let mut u = -chol.solve(&spec.lin);
    let mut active: Vec<usize> = Vec::new();
    let mut lam = vec![0.0; nr];
    let mut iters = 0usize;
    let mut status = QPStatus::Optimal;
    let mut farkas = None;

    // Rows with a vanishing normal are either vacuous or contradictory.
    for (i, r) in rows.iter().enumerate() {
        if r.scale == 0.0 && r.b < -tol {
            let mut w = vec![0.0; nr];
            w[i] = 1.0;
            return Ok(finish(spec, &rows, u, lam, &active, QPStatus::Infeasible, 0, Some(w)));
        }
    }

    'outer: loop {
        // Pick the most violated constraint.
        let mut p = None;
        let mut worst = -tol * (1.0 + u.amax());
        for (i, r) in rows.iter().enumerate() {
            if r.scale == 0.0 || active.contains(&i) {
                continue;
            }
            let s = r.b - r.a.dot(&u);
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        let mut lam_p = 0.0;
        loop {
            iters += 1;
            if iters > max_iter {
                status = QPStatus::MaxIter;
                break 'outer;
            }
            let nm = normals(&rows, &active, n);
            let (z, y) = match solve_kkt(&q, &nm, &(-&rows[p].a), &DVector::zeros(active.len())) {
                Some(v) => v,
                None => return Err(QPError::Numerical(f64::INFINITY)),
            };
            // Largest step keeping working-set multipliers nonnegative.
            let mut t1 = f64::INFINITY;
            let mut k_drop = None;
            for (c, &i) in active.iter().enumerate() {
                if y[c] < -1e-14 {
                    let t = lam[i] / -y[c];
                    if t < t1 {
                        t1 = t;
                        k_drop = Some(c);
                    }
                }
            }
            let apz = rows[p].a.dot(&z);
            let s_p = rows[p].b - rows[p].a.dot(&u);
            // A full working set, or a normal in its span, admits no primal step.
            let t2 = if active.len() < n && apz < -dep_tol && independent(&q, &rows, &active, p, n) { s_p / apz } else { f64::INFINITY };
            if !t1.is_finite() && !t2.is_finite() {
                // a_p = -N y with y >= 0: contradicts the working set.
                let mut w = vec![0.0; nr];
                w[p] = 1.0;
                for (c, &i) in active.iter().enumerate() {
                    w[i] = y[c].max(0.0);
                }
                status = QPStatus::Infeasible;
                farkas = Some(w);
                break 'outer;
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                u += &z * t;
            }
            for (c, &i) in active.iter().enumerate() {
                lam[i] += t * y[c];
            }
            lam_p += t;
            if t2 <= t1 {
                lam[p] = lam_p;
                active.push(p);
                continue 'outer;
            }
            let c = k_drop.expect("blocking constraint");
            let i = active.remove(c);
            lam[i] = 0.0;
        }
    }

    if status == QPStatus::Optimal {
        polish(&q, spec, &rows, &active, &mut u, &mut lam);
    }
    Ok(finish(spec, &rows, u, lam, &active, status, iters, farkas))
}

/// Re-solve the equality-constrained KKT system of the final working set.
fn polish(q: &DMatrix<f64>, spec: &QPSpec, rows: &[Row], active: &[usize], u: &mut DVector<f64>, lam: &mut [f64]) {
    let n = spec.n();
    let nm = normals(rows, active, n);
    let b: DVector<f64> = DVector::from_iterator(active.len(), active.iter().map(|&i| rows[i].b));
    let Some((u2, l2)) = solve_kkt(q, &nm, &(-&spec.lin), &b) else { return };
    let dual_ok = l2.iter().all(|&x| x >= -1e-10);
    let primal_ok = rows.iter().all(|r| r.a.dot(&u2) - r.b <= 1e-10);
    if dual_ok && primal_ok {
        *u = u2;
        for (c, &i) in active.iter().enumerate() {
            lam[i] = l2[c].max(0.0);
        }
    }
}

fn finish(
    spec: &QPSpec,
    rows: &[Row],
    u: DVector<f64>,
    lam: Vec<f64>,
    active: &[usize],
    status: QPStatus,
    iterations: usize,
    farkas: Option<Vec<f64>>,
) -> QPSolution {
    let n = spec.n();
    let mut dual = DVector::zeros(spec.m());
    let mut dual_lb = DVector::zeros(n);
    let mut dual_ub = DVector::zeros(n);
    let mut act = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        // Undo the row normalization.
        let l = if r.scale > 0.0 { lam[i] / r.scale } else { 0.0 };
        match r.kind {
            RowKind::G(k) => {
                dual[k] = l;
                if active.contains(&i) {
                    act.push(k);
                }
            }
            RowKind::Upper(k) => dual_ub[k] = l,
            RowKind::Lower(k) => dual_lb[k] = l,
        }
    }
    act.sort_unstable();
    let farkas = farkas.map(|w| {
        w.iter()
            .zip(rows.iter())
            .map(|(wi, r)| if r.scale > 0.0 { wi / r.scale } else { *wi })
            .collect()
    });
    QPSolution { primal: u, dual, dual_lb, dual_ub, active_set: act, status, iterations, farkas }
}

/// Largest absolute KKT residual (stationarity, primal and dual feasibility,
/// complementary slackness) of an optimal solution.
pub fn kkt_residual(spec: &QPSpec, sol: &QPSolution) -> f64 {
    let u = &sol.primal;
    let q = &spec.hess + spec.hess.transpose();
    let mut stat = &q * u + &spec.lin + spec.g.transpose() * &sol.dual;
    stat += &sol.dual_ub - &sol.dual_lb;
    let mut r = stat.amax();
    let gu = &spec.g * u - &spec.h;
    for i in 0..spec.m() {
        r = r.max(gu[i].max(0.0)).max((-sol.dual[i]).max(0.0)).max((sol.dual[i] * gu[i]).abs());
    }
    for j in 0..spec.n() {
        if spec.ub[j].is_finite() {
            r = r.max((u[j] - spec.ub[j]).max(0.0)).max((sol.dual_ub[j] * (u[j] - spec.ub[j])).abs());
        }
        if spec.lb[j].is_finite() {
            r = r.max((spec.lb[j] - u[j]).max(0.0)).max((sol.dual_lb[j] * (spec.lb[j] - u[j])).abs());
        }
    }
    r
}

/// Largest `|lambda_i * (G u - h)_i|` over the inequality rows.
pub fn complementarity_residual(spec: &QPSpec, sol: &QPSolution) -> f64 {
    let gu = &spec.g * &sol.primal - &spec.h;
    (0..spec.m()).map(|i| (sol.dual[i] * gu[i]).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktDifferentials {
    pub d_mu: DVector<f64>,
    /// One entry per `G` row; zero for inactive and dropped rows.
    pub d_lambda: DVector<f64>,
    /// Weakly active rows (multiplier and slack both below tolerance) left out of the system.
    pub dropped: Vec<usize>,
}

/// Backward pass through the KKT conditions for a loss gradient `incoming = dl/du*`.
///
/// Solves
///
/// ```text
/// [ H+H'   G' D(lam) ] [d_mu ]     [incoming]
/// [ G      D(Gu - h) ] [d_lam] = - [   0    ]
/// ```
///
/// restricted to strictly active rows. Active box bounds enter as fixed rows so the
/// sensitivities stay exact, but no gradient is reported for them.
pub fn kkt_differentials(spec: &QPSpec, sol: &QPSolution, incoming: &DVector<f64>) -> Result<KktDifferentials, QPError> {
    if sol.status != QPStatus::Optimal {
        return Err(QPError::NotOptimal);
    }
    let n = spec.n();
    if incoming.len() != n {
        return Err(QPError::Shape("incoming".into()));
    }
    let q = &spec.hess + spec.hess.transpose();
    let u = &sol.primal;
    let slack = &spec.h - &spec.g * u;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut g_rows = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..spec.m() {
        if sol.dual[i] > DEGENERACY_TOL {
            cols.push(spec.g.row(i).transpose());
            g_rows.push(i);
        } else if slack[i] <= DEGENERACY_TOL {
            dropped.push(i);
        }
    }
    for j in 0..n {
        for (lam, on) in [(sol.dual_ub[j], 1.0), (sol.dual_lb[j], -1.0)] {
            if lam > DEGENERACY_TOL {
                let mut a = DVector::zeros(n);
                a[j] = on;
                cols.push(a);
            }
        }
    }
    let mut nm = DMatrix::zeros(n, cols.len());
    for (c, a) in cols.iter().enumerate() {
        nm.set_column(c, a);
    }
    // Substituting w = D(lam) d_lam symmetrizes the system.
    let (d_mu, w) = solve_kkt(&q, &nm, &(-incoming), &DVector::zeros(cols.len())).ok_or(QPError::SingularKKT)?;
    let mut d_lambda = DVector::zeros(spec.m());
    for (c, &i) in g_rows.iter().enumerate() {
        d_lambda[i] = w[c] / sol.dual[i];
    }
    Ok(KktDifferentials { d_mu, d_lambda, dropped })
}

/// The full (unreduced) differential matrix `[[H+H', G' D(lam)], [G, D(Gu-h)]]`.
pub fn kkt_matrix(spec: &QPSpec, sol: &QPSolution) -> DMatrix<f64> {
    let (n, m) = (spec.n(), spec.m());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&(&spec.hess + spec.hess.transpose()));
    let gl = spec.g.transpose() * DMatrix::from_diagonal(&sol.dual);
    k.view_mut((0, n), (n, m)).copy_from(&gl);
    k.view_mut((n, 0), (m, n)).copy_from(&spec.g);
    let r = &spec.g * &sol.primal - &spec.h;
    for i in 0..m {
        k[(n + i, n + i)] = r[i];
    }
    k
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPGradients {
    pub d_hess: DMatrix<f64>,
    pub d_lin: DVector<f64>,
    pub d_g: DMatrix<f64>,
    pub d_h: DVector<f64>,
}

/// Gradients of the scalar loss with respect to every entry of `H`, `F`, `G`, `h`.
pub fn parameter_grads(_spec: &QPSpec, sol: &QPSolution, diff: &KktDifferentials) -> QPGradients {
    let u = &sol.primal;
    let d = &diff.d_mu;
    let lam = &sol.dual;
    let dl = lam.component_mul(&diff.d_lambda);
    QPGradients {
        d_hess: d * u.transpose() + u * d.transpose(),
        d_lin: d.clone(),
        d_g: &dl * u.transpose() + lam * d.transpose(),
        d_h: -dl,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

/// Phase-1 check: is `{u : G u <= h, lb <= u <= ub}` nonempty?
pub fn feasibility_probe(g: &DMatrix<f64>, h: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> Feasibility {
    let n = g.ncols().max(lb.len());
    let spec = QPSpec {
        hess: DMatrix::identity(n, n),
        lin: DVector::zeros(n),
        g: if g.ncols() == n { g.clone() } else { DMatrix::zeros(0, n) },
        h: h.clone(),
        lb: lb.clone(),
        ub: ub.clone(),
    };
    match solve(&spec) {
        Ok(s) if s.status == QPStatus::Optimal => Feasibility::Feasible,
        _ => Feasibility::Infeasible,
    }
}
