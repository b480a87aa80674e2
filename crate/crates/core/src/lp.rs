//! Sparse linear programs and an interior-point backend.
//!
//! Problems are stated as `min cᵀx` subject to equality rows, `≤` rows and
//! variable bounds. Solving goes through Clarabel; the returned certificate
//! carries the primal residual and the relative duality gap recomputed here
//! from the unscaled data.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on scaled primal residual and relative duality gap.
pub const LP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Eq,
    Le,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub terms: Vec<(usize, f64)>,
    pub kind: RowKind,
    pub rhs: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub names: Vec<String>,
    pub rows: Vec<Row>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64, cost: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.names.push(name.into());
        self.cost.len() - 1
    }

    pub fn add_row(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, kind: RowKind, rhs: f64) -> usize {
        self.rows.push(Row { terms, kind, rhs, label: label.into() });
        self.rows.len() - 1
    }

    pub fn add_eq(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_row(label, terms, RowKind::Eq, rhs)
    }

    pub fn add_le(&mut self, label: impl Into<String>, terms: Vec<(usize, f64)>, rhs: f64) -> usize {
        self.add_row(label, terms, RowKind::Le, rhs)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l > u || l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::Infeasible(format!("variable {} has bounds [{l}, {u}]", self.names[i])));
            }
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::Spec("objective has non-finite coefficients".into()));
        }
        for r in &self.rows {
            if !r.rhs.is_finite() || r.terms.iter().any(|&(j, a)| j >= n || !a.is_finite()) {
                return Err(Error::Spec(format!("row {} is malformed", r.label)));
            }
        }
        Ok(())
    }

    /// Largest scaled violation `viol / (1 + |rhs|)` over rows and bounds,
    /// with the offending row or variable.
    pub fn max_violation(&self, x: &[f64]) -> (f64, String) {
        let mut worst = (0.0, String::new());
        for r in &self.rows {
            let ax: f64 = r.terms.iter().map(|&(j, a)| a * x[j]).sum();
            let v = match r.kind {
                RowKind::Eq => (ax - r.rhs).abs(),
                RowKind::Le => (ax - r.rhs).max(0.0),
            } / (1.0 + r.rhs.abs());
            if v > worst.0 {
                worst = (v, r.label.clone());
            }
        }
        for (i, &xi) in x.iter().enumerate() {
            let lo = if self.lower[i].is_finite() { (self.lower[i] - xi).max(0.0) / (1.0 + self.lower[i].abs()) } else { 0.0 };
            let hi = if self.upper[i].is_finite() { (xi - self.upper[i]).max(0.0) / (1.0 + self.upper[i].abs()) } else { 0.0 };
            let v = lo.max(hi);
            if v > worst.0 {
                worst = (v, format!("bound of {}", self.names[i]));
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpCertificate {
    /// Scaled primal residual, see [`LinearProgram::max_violation`].
    pub primal_residual: f64,
    /// `|primal − dual| / max(1, |primal|)`
    pub relative_gap: f64,
    pub dual_objective: f64,
    pub iterations: u32,
    pub solve_seconds: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// One multiplier per row (sign convention of `Ax + s = b`).
    pub row_duals: Vec<f64>,
    pub certificate: LpCertificate,
}

/// Solves the LP with Clarabel's interior-point method.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.num_vars();
    // equalities first, then ≤ rows, then finite bounds
    let eq: Vec<usize> = (0..lp.num_rows()).filter(|&i| lp.rows[i].kind == RowKind::Eq).collect();
    let le: Vec<usize> = (0..lp.num_rows()).filter(|&i| lp.rows[i].kind == RowKind::Le).collect();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut b = Vec::new();
    let mut m = 0;
    for &i in eq.iter().chain(&le) {
        for &(j, a) in &lp.rows[i].terms {
            if a != 0.0 {
                triplets.push((m, j, a));
            }
        }
        b.push(lp.rows[i].rhs);
        m += 1;
    }
    for j in 0..n {
        if lp.upper[j].is_finite() {
            triplets.push((m, j, 1.0));
            b.push(lp.upper[j]);
            m += 1;
        }
        if lp.lower[j].is_finite() {
            triplets.push((m, j, -1.0));
            b.push(-lp.lower[j]);
            m += 1;
        }
    }
    let a = csc_from_triplets(m, n, triplets);
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if !eq.is_empty() {
        cones.push(ZeroConeT(eq.len()));
    }
    if m > eq.len() {
        cones.push(NonnegativeConeT(m - eq.len()));
    }
    let mut last_err = None;
    for &reg in &STATIC_REGULARIZATION {
        match attempt(lp, &p, &a, &b, &cones, reg) {
            Ok(r) => return Ok(finish(lp, &eq, &le, r)),
            Err(e @ (Error::Infeasible(_) | Error::Unbounded)) => return Err(e),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Static KKT regularization tried in turn; the larger values rescue
/// problems on which the solver stalls short of the tolerance.
const STATIC_REGULARIZATION: [f64; 3] = [1e-8, 1e-7, 1e-6];

struct Attempt {
    x: Vec<f64>,
    z: Vec<f64>,
    dual_objective: f64,
    primal_residual: f64,
    relative_gap: f64,
    iterations: u32,
    solve_seconds: f64,
    status: String,
}

fn attempt(
    lp: &LinearProgram,
    p: &CscMatrix<f64>,
    a: &CscMatrix<f64>,
    b: &[f64],
    cones: &[SupportedConeT<f64>],
    reg: f64,
) -> Result<Attempt> {
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(500)
        .tol_gap_abs(1e-9)
        .tol_gap_rel(1e-9)
        .tol_feas(1e-9)
        .static_regularization_constant(reg)
        .build()
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let mut solver =
        DefaultSolver::new(p, &lp.cost, a, b, cones, settings).map_err(|e| Error::Solver(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let (v, row) = lp.max_violation(&sol.x);
            return Err(Error::Infeasible(format!("largest violation {v:.3e} at {row}")));
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => return Err(Error::Unbounded),
        other => return Err(Error::Solver(format!("solver stopped with status {other:?}"))),
    }
    let objective = lp.objective(&sol.x);
    let (primal_residual, worst) = lp.max_violation(&sol.x);
    let relative_gap = (objective - sol.obj_val_dual).abs() / objective.abs().max(1.0);
    if primal_residual > LP_TOLERANCE || relative_gap > LP_TOLERANCE {
        return Err(Error::Solver(format!(
            "solution misses tolerance: residual {primal_residual:.3e} at {worst}, gap {relative_gap:.3e}"
        )));
    }
    Ok(Attempt {
        x: sol.x.clone(),
        z: sol.z.clone(),
        dual_objective: sol.obj_val_dual,
        primal_residual,
        relative_gap,
        iterations: sol.iterations,
        solve_seconds: sol.solve_time,
        status: format!("{:?}", sol.status),
    })
}

fn finish(lp: &LinearProgram, eq: &[usize], le: &[usize], r: Attempt) -> LpSolution {
    let mut row_duals = vec![0.0; lp.num_rows()];
    for (k, &i) in eq.iter().chain(le).enumerate() {
        row_duals[i] = r.z[k];
    }
    LpSolution {
        objective: lp.objective(&r.x),
        x: r.x,
        row_duals,
        certificate: LpCertificate {
            primal_residual: r.primal_residual,
            relative_gap: r.relative_gap,
            dual_objective: r.dual_objective,
            iterations: r.iterations,
            solve_seconds: r.solve_seconds,
            status: r.status,
        },
    }
}

fn csc_from_triplets(m: usize, n: usize, mut t: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    t.sort_by_key(|&(r, c, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(t.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in t {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
        last = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
