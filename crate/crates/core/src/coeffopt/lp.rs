//! The design problem as a sparse linear program.
//!
//! Variables are `ρ(n, t)` for every stage and statistic node (row-major),
//! followed by `C0..C3`; all are non-negative. Each node contributes the
//! rows `ρ ≤ D*_0(C)` and `ρ ≤ D*_1(C)`, and for `n < N` also
//! `ρ_n(t) - Ĥ_n(t, ·) ρ_{n+1} ≤ 1`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
};
use serde::{Deserialize, Serialize};

use super::{coefficient_prices, epsilon_bound, Constraints};
use crate::bellman::Coefficients;
use crate::error::{Error, Result};
use crate::grid::{Conditioning, DiscretizedModel, ForwardMarginals, TransitionOperator};
use crate::model::Hypothesis;
use crate::par;

/// Constraint coefficients at or below this magnitude are left out.
const NEGLIGIBLE: f64 = 1e-13;

/// Coefficients below this fraction of the largest one are reported as 0.
pub const ZERO_COEFFICIENT_RATIO: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub t_count: usize,
    pub horizon: usize,
    /// Objective to maximize.
    pub objective: Vec<f64>,
    /// Constraint rows `A x ≤ b` in CSR form.
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Index of `ρ(0, t0)`.
    pub start_index: usize,
}

impl LinearProgram {
    pub fn variable_count(&self) -> usize {
        self.objective.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.rhs.len()
    }

    pub fn rho_index(&self, n: usize, t: usize) -> usize {
        n * self.t_count + t
    }

    pub fn coefficient_index(&self, i: usize) -> usize {
        self.t_count * (self.horizon + 1) + i
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Largest violation of `A x ≤ b` and `x ≥ 0`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let rows = (0..self.constraint_count()).map(|r| {
            let (cols, vals) = self.row(r);
            let lhs: f64 = cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum();
            lhs - self.rhs[r]
        });
        rows.chain(x.iter().map(|v| -v)).fold(0.0, f64::max)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Builds the regularized design LP.
pub fn assemble_lp(
    dm: &DiscretizedModel,
    op: &TransitionOperator,
    fm: &ForwardMarginals,
    k: &Constraints,
    epsilon: f64,
) -> Result<LinearProgram> {
    let bound = epsilon_bound(dm, k);
    if !(epsilon >= 0.0 && epsilon < bound) {
        return Err(Error::RegularizationDomain { epsilon, bound });
    }
    let nt = dm.t_count();
    let horizon = dm.horizon();
    let rho_count = nt * (horizon + 1);
    let c_base = rho_count;

    let mut objective = vec![0.0; rho_count + 4];
    let weight = epsilon / (horizon + 1) as f64;
    if weight > 0.0 {
        for n in 0..=horizon {
            for (t, &m) in fm.stage(n).iter().enumerate() {
                objective[n * nt + t] += weight * m;
            }
        }
    }
    let start_index = dm.t0_index();
    objective[start_index] += 1.0;
    for (i, price) in coefficient_prices(dm, k).into_iter().enumerate() {
        objective[c_base + i] = -price;
    }

    type Row = (Vec<usize>, Vec<f64>, f64);
    let blocks: Vec<Vec<Row>> = par::map_indexed(rho_count, |idx| {
        let (n, t) = (idx / nt, idx % nt);
        let e0 = dm.posterior(Hypothesis::H0, n, t);
        let e1 = dm.posterior(Hypothesis::H1, n, t);
        let v0 = dm.variance(Hypothesis::H0, n, t);
        let v1 = dm.variance(Hypothesis::H1, n, t);
        let mut rows = Vec::with_capacity(3);
        rows.push(sparse_row(idx, &[(c_base + 1, -e1), (c_base + 2, -e0 * v0)], 0.0));
        rows.push(sparse_row(idx, &[(c_base, -e0), (c_base + 3, -e1 * v1)], 0.0));
        if n < horizon {
            let (start, w) = op.matrix(n, Conditioning::Unconditional).row(t);
            let next = (n + 1) * nt + start;
            let mut cols = Vec::with_capacity(w.len() + 1);
            let mut vals = Vec::with_capacity(w.len() + 1);
            cols.push(idx);
            vals.push(1.0);
            for (j, &wj) in w.iter().enumerate() {
                if wj > NEGLIGIBLE {
                    cols.push(next + j);
                    vals.push(-wj);
                }
            }
            rows.push((cols, vals, 1.0));
        }
        rows
    });

    let mut row_ptr = vec![0];
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    let mut rhs = Vec::new();
    for (cols, vals, b) in blocks.into_iter().flatten() {
        col_idx.extend(cols);
        values.extend(vals);
        rhs.push(b);
        row_ptr.push(col_idx.len());
    }
    Ok(LinearProgram {
        t_count: nt,
        horizon,
        objective,
        row_ptr,
        col_idx,
        values,
        rhs,
        start_index,
    })
}

fn sparse_row(diag: usize, terms: &[(usize, f64)], rhs: f64) -> (Vec<usize>, Vec<f64>, f64) {
    let mut cols = vec![diag];
    let mut vals = vec![1.0];
    for &(c, v) in terms {
        if v.abs() > NEGLIGIBLE {
            cols.push(c);
            vals.push(v);
        }
    }
    (cols, vals, rhs)
}

/// Outcome of [`solve_design_lp`].
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub coefficients: Coefficients,
    /// `ρ(n, t)` values of the optimal point, row-major.
    pub rho: Vec<f64>,
    pub objective: f64,
    pub report: SolverReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: String,
    pub status: String,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Largest constraint violation of the returned point.
    pub max_violation: f64,
    pub objective: f64,
    /// `ρ(0, t0)` as returned by the solver, before recomputation.
    pub solver_start_value: f64,
}

/// Solves `lp` with an interior-point method to tolerance `tol`.
pub fn solve_design_lp(lp: &LinearProgram, tol: f64) -> Result<LpSolution> {
    let nv = lp.variable_count();
    let m = lp.constraint_count();

    // Stack [A; -I] column-wise for the non-negative cone.
    let mut counts = vec![0usize; nv];
    for &c in &lp.col_idx {
        counts[c] += 1;
    }
    let mut colptr = Vec::with_capacity(nv + 1);
    colptr.push(0);
    for c in 0..nv {
        colptr.push(colptr[c] + counts[c] + 1);
    }
    let nnz = colptr[nv];
    let mut rowval = vec![0usize; nnz];
    let mut nzval = vec![0.0; nnz];
    let mut fill: Vec<usize> = colptr[..nv].to_vec();
    for r in 0..m {
        let (cols, vals) = lp.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            rowval[fill[c]] = r;
            nzval[fill[c]] = v;
            fill[c] += 1;
        }
    }
    for c in 0..nv {
        rowval[fill[c]] = m + c;
        nzval[fill[c]] = -1.0;
    }
    let a = CscMatrix::new(m + nv, nv, colptr, rowval, nzval);
    let p = CscMatrix::zeros((nv, nv));
    let q: Vec<f64> = lp.objective.iter().map(|v| -v).collect();
    let mut b = lp.rhs.clone();
    b.extend(std::iter::repeat_n(0.0, nv));
    let cones = [NonnegativeConeT(m + nv)];

    let tol = tol.clamp(1e-12, 1e-3);
    let settings = DefaultSettingsBuilder::default()
        .verbose(std::env::var_os("SEQJDE_LP_VERBOSE").is_some())
        .max_iter(400)
        .direct_solve_method(std::env::var("SEQJDE_LP_METHOD").unwrap_or("faer".into()))
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .build()
        .map_err(|e| Error::Solver {
            status: format!("settings: {e:?}"),
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
        })?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).map_err(|e| Error::Solver {
        status: format!("setup: {e:?}"),
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
    })?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(Error::Unattainable)
        }
        status => {
            return Err(Error::Solver {
                status: format!("{status:?}"),
                primal_residual: sol.r_prim,
                dual_residual: sol.r_dual,
            })
        }
    }

    let x = &sol.x;
    let raw: Vec<f64> = (0..4).map(|i| x[lp.coefficient_index(i)].max(0.0)).collect();
    let top = raw.iter().cloned().fold(0.0, f64::max);
    let mut c = [0.0; 4];
    for i in 0..4 {
        c[i] = if raw[i] < ZERO_COEFFICIENT_RATIO * top || raw[i] <= tol.sqrt() { 0.0 } else { raw[i] };
    }
    let objective = lp.objective_value(x);
    Ok(LpSolution {
        coefficients: Coefficients(c),
        rho: x[..lp.coefficient_index(0)].to_vec(),
        objective,
        report: SolverReport {
            method: "lp".into(),
            status: format!("{:?}", sol.status),
            iterations: sol.iterations as usize,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            max_violation: lp.max_violation(x),
            objective,
            solver_start_value: x[lp.start_index],
        },
    })
}
