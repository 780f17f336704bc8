//! Choosing the cost coefficients that meet the error constraints.
//!
//! The designed test maximizes the dual objective
//! `L(C) = ρ_0(t0) - Σ_i p_i C_i κ_i` (detection terms weighted by `p(H_i)`,
//! estimation terms by `p(H_{i-2})`), whose maximum is the smallest expected
//! run-length among tests meeting the constraints. [`lp`] solves the
//! regularized problem as one linear program; [`ascent`] climbs the same
//! objective directly by re-running the backward recursion.

pub mod ascent;
pub mod lp;

use serde::{Deserialize, Serialize};

use crate::bellman::{backward_induction, extract_regions, Coefficients, CostTables, Label, Regions};
use crate::error::{Error, Result};
use crate::grid::{
    build, Conditioning, Discretization, DiscretizedModel, ForwardMarginals, GridSpec, LeakageReport,
    PosteriorTables, TransitionOperator,
};
use crate::model::{Hypothesis, ModelSpec};
use crate::par;
use crate::table::Table;

pub use ascent::{dual_ascent, AscentOutcome};
pub use lp::{assemble_lp, solve_design_lp, LinearProgram, LpSolution, SolverReport, ZERO_COEFFICIENT_RATIO};

/// Error targets `[κ0, κ1, κ2, κ3]`: error probabilities under `H0`, `H1`,
/// then conditional MSEs under `H0`, `H1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Constraints(pub [f64; 4]);

impl Constraints {
    pub fn new(kappa: [f64; 4]) -> Result<Self> {
        for (i, k) in kappa.iter().enumerate() {
            if !(k.is_finite() && *k > 0.0) {
                return Err(Error::InvalidConstraints(format!("kappa[{i}] = {k} must be positive")));
            }
        }
        for (i, k) in kappa[..2].iter().enumerate() {
            if *k >= 1.0 {
                return Err(Error::InvalidConstraints(format!(
                    "kappa[{i}] = {k} is an error probability and must be below 1"
                )));
            }
        }
        Ok(Self(kappa))
    }

    pub fn error_probability(&self, h: Hypothesis) -> f64 {
        self.0[h.index()]
    }

    pub fn mse(&self, h: Hypothesis) -> f64 {
        self.0[2 + h.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }
}

/// Largest regularization weight for which the regularized objective stays
/// bounded.
pub fn epsilon_bound(dm: &DiscretizedModel, k: &Constraints) -> f64 {
    let [k0, k1, k2, k3] = k.0;
    k0.min(k1)
        .min(k2 / dm.prior_variance(Hypothesis::H0))
        .min(k3 / dm.prior_variance(Hypothesis::H1))
}

/// `min(κ) / 50`, kept strictly below [`epsilon_bound`].
pub fn default_epsilon(dm: &DiscretizedModel, k: &Constraints) -> f64 {
    let smallest = k.0.iter().cloned().fold(f64::INFINITY, f64::min);
    (smallest / 50.0).min(0.5 * epsilon_bound(dm, k))
}

/// Prices `p_i κ_i` of the four coefficients in the dual objective.
pub(crate) fn coefficient_prices(dm: &DiscretizedModel, k: &Constraints) -> [f64; 4] {
    let p0 = dm.hypothesis_prior(Hypothesis::H0);
    let p1 = dm.hypothesis_prior(Hypothesis::H1);
    [p0 * k.0[0], p1 * k.0[1], p0 * k.0[2], p1 * k.0[3]]
}

/// Conditional error probabilities `α` and MSEs `β` of the policy given by a
/// region map, per hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTables {
    pub alpha: [Table; 2],
    pub beta: [Table; 2],
}

impl ErrorTables {
    pub fn alpha(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.alpha[h.index()].get(n, t)
    }

    pub fn beta(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.beta[h.index()].get(n, t)
    }

    /// `[α0, α1, β0, β1]` at `(n, t)`.
    pub fn at(&self, n: usize, t: usize) -> [f64; 4] {
        [
            self.alpha[0].get(n, t),
            self.alpha[1].get(n, t),
            self.beta[0].get(n, t),
            self.beta[1].get(n, t),
        ]
    }
}

/// Backward recursion of `table` under `op`'s stage matrices `cond`: stop
/// cells take `stop_value(n, t, label)`, continuation cells average the next
/// stage.
fn recurse<F>(
    op: &TransitionOperator,
    regions: &Regions,
    cond: Conditioning,
    stop_value: F,
) -> Table
where
    F: Fn(usize, usize, Label) -> f64 + Sync,
{
    let horizon = regions.horizon();
    let nt = regions.t_count();
    let mut out = Table::filled(horizon + 1, nt, 0.0);
    for n in (0..=horizon).rev() {
        let row: Vec<f64> = {
            let next = (n < horizon).then(|| out.row(n + 1));
            par::map_indexed(nt, |t| match regions.get(n, t) {
                Label::Continue => op.matrix(n, cond).row_dot(t, next.expect("continue before N")),
                label => stop_value(n, t, label),
            })
        };
        out.row_mut(n).copy_from_slice(&row);
    }
    out
}

pub fn error_tables(dm: &DiscretizedModel, op: &TransitionOperator, regions: &Regions) -> ErrorTables {
    let alpha = Hypothesis::BOTH.map(|h| {
        let wrong = Label::stop_for(h.other());
        recurse(op, regions, Conditioning::Given(h), |_, _, l| if l == wrong { 1.0 } else { 0.0 })
    });
    let beta = Hypothesis::BOTH.map(|h| {
        let right = Label::stop_for(h);
        recurse(op, regions, Conditioning::Given(h), |n, t, l| {
            if l == right {
                dm.variance(h, n, t)
            } else {
                0.0
            }
        })
    });
    ErrorTables { alpha, beta }
}

/// Exact derivatives `∂ρ(n, t) / ∂C_i` of the discrete recursion for a fixed
/// region map.
pub fn cost_sensitivities(dm: &DiscretizedModel, op: &TransitionOperator, regions: &Regions) -> [Table; 4] {
    let e = |h, n, t| dm.posterior(h, n, t);
    let v = |h, n, t| dm.variance(h, n, t);
    let uncond = Conditioning::Unconditional;
    [
        recurse(op, regions, uncond, |n, t, l| {
            if l == Label::StopH1 {
                e(Hypothesis::H0, n, t)
            } else {
                0.0
            }
        }),
        recurse(op, regions, uncond, |n, t, l| {
            if l == Label::StopH0 {
                e(Hypothesis::H1, n, t)
            } else {
                0.0
            }
        }),
        recurse(op, regions, uncond, |n, t, l| {
            if l == Label::StopH0 {
                e(Hypothesis::H0, n, t) * v(Hypothesis::H0, n, t)
            } else {
                0.0
            }
        }),
        recurse(op, regions, uncond, |n, t, l| {
            if l == Label::StopH1 {
                e(Hypothesis::H1, n, t) * v(Hypothesis::H1, n, t)
            } else {
                0.0
            }
        }),
    ]
}

/// Dual objective `L(C)` and its gradient from the error tables at `(0, t0)`.
pub fn dual_objective_and_gradient(
    dm: &DiscretizedModel,
    op: &TransitionOperator,
    k: &Constraints,
    c: &Coefficients,
) -> (f64, [f64; 4]) {
    let costs = backward_induction(dm, op, c);
    let regions = extract_regions(&costs);
    let errors = error_tables(dm, op, &regions);
    let t0 = dm.t0_index();
    let value = dual_value(dm, k, c, costs.rho.get(0, t0));
    let p = [dm.hypothesis_prior(Hypothesis::H0), dm.hypothesis_prior(Hypothesis::H1)];
    let at = errors.at(0, t0);
    let grad = [0, 1, 2, 3].map(|i| p[i % 2] * (at[i] - k.0[i]));
    (value, grad)
}

/// `ρ_0(t0) - Σ p_i C_i κ_i`.
pub fn dual_value(dm: &DiscretizedModel, k: &Constraints, c: &Coefficients, start_cost: f64) -> f64 {
    let prices = coefficient_prices(dm, k);
    start_cost - (0..4).map(|i| prices[i] * c.0[i]).sum::<f64>()
}

/// Regularized objective (the one the LP maximizes) and its exact gradient
/// for the region map induced by `c`.
#[derive(Debug, Clone)]
pub struct DualPoint {
    pub value: f64,
    pub gradient: [f64; 4],
    pub costs: CostTables,
    pub regions: Regions,
}

pub fn regularized_dual(
    dm: &DiscretizedModel,
    op: &TransitionOperator,
    fm: &ForwardMarginals,
    k: &Constraints,
    c: &Coefficients,
    epsilon: f64,
) -> DualPoint {
    let costs = backward_induction(dm, op, c);
    let regions = extract_regions(&costs);
    let sens = cost_sensitivities(dm, op, &regions);
    let t0 = dm.t0_index();
    let horizon = dm.horizon();
    let weight = epsilon / (horizon + 1) as f64;
    let mass = |table: &Table| -> f64 {
        (0..=horizon)
            .map(|n| fm.stage(n).iter().zip(table.row(n)).map(|(m, v)| m * v).sum::<f64>())
            .sum()
    };
    let prices = coefficient_prices(dm, k);
    let mut value = dual_value(dm, k, c, costs.rho.get(0, t0));
    if weight > 0.0 {
        value += weight * mass(&costs.rho);
    }
    let gradient = [0, 1, 2, 3].map(|i| {
        let reg = if weight > 0.0 { weight * mass(&sens[i]) } else { 0.0 };
        sens[i].get(0, t0) + reg - prices[i]
    });
    DualPoint {
        value,
        gradient,
        costs,
        regions,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Lp,
    DualAscent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignOptions {
    /// Regularization weight; `None` picks [`default_epsilon`].
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_solver")]
    pub solver: SolverMethod,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_solver() -> SolverMethod {
    SolverMethod::Lp
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    500
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            solver: default_solver(),
            tol: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

impl DesignOptions {
    pub fn resolve_epsilon(&self, dm: &DiscretizedModel, k: &Constraints) -> Result<f64> {
        let bound = epsilon_bound(dm, k);
        let epsilon = self.epsilon.unwrap_or_else(|| default_epsilon(dm, k));
        if epsilon >= 0.0 && epsilon < bound {
            Ok(epsilon)
        } else {
            Err(Error::RegularizationDomain { epsilon, bound })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignDiagnostics {
    pub leakage: LeakageReport,
    pub solver: SolverReport,
    pub epsilon: f64,
    /// `ρ(0, t0)` recomputed by the recursion at `C*`.
    pub start_cost: f64,
}

/// A designed sequential test with everything needed to run and audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignedTest {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub constraints: Constraints,
    pub options: DesignOptions,
    pub coefficients: Coefficients,
    /// `L(C*)`, the expected run-length of the test.
    pub dual_objective: f64,
    pub costs: CostTables,
    pub regions: Regions,
    pub posterior: PosteriorTables,
    /// `[α0, α1, β0, β1]` at the start node.
    pub start_errors: [f64; 4],
    pub diagnostics: DesignDiagnostics,
}

impl DesignedTest {
    pub fn horizon(&self) -> usize {
        self.grid.horizon
    }

    /// Table-backed view for policy evaluation.
    pub fn discretized(&self) -> DiscretizedModel {
        DiscretizedModel::from_tables(self.posterior.clone()).expect("consistent tables")
    }
}

/// Builds the grid and designs the test.
pub fn design(model: &ModelSpec, spec: &GridSpec, k: &Constraints, opts: &DesignOptions) -> Result<DesignedTest> {
    let problem = model.build()?;
    let disc = build(&problem, spec)?;
    design_on(model, spec, &disc, k, opts)
}

/// Designs the test on an existing discretization of `model` on `spec`.
pub fn design_on(
    model: &ModelSpec,
    spec: &GridSpec,
    disc: &Discretization,
    k: &Constraints,
    opts: &DesignOptions,
) -> Result<DesignedTest> {
    let dm = &disc.model;
    let op = &disc.transitions;
    let epsilon = opts.resolve_epsilon(dm, k)?;
    let (coefficients, report) = match opts.solver {
        SolverMethod::Lp => {
            let lp = assemble_lp(dm, op, &disc.marginals, k, epsilon)?;
            let sol = solve_design_lp(&lp, opts.tol)?;
            (sol.coefficients, sol.report)
        }
        SolverMethod::DualAscent => {
            let out = dual_ascent(dm, op, &disc.marginals, k, &Coefficients::zero(), opts)?;
            (out.coefficients, out.report)
        }
    };
    let costs = backward_induction(dm, op, &coefficients);
    let regions = extract_regions(&costs);
    let errors = error_tables(dm, op, &regions);
    let t0 = dm.t0_index();
    let start_cost = costs.rho.get(0, t0);
    Ok(DesignedTest {
        model: model.clone(),
        grid: *spec,
        constraints: *k,
        options: *opts,
        coefficients,
        dual_objective: dual_value(dm, k, &coefficients, start_cost),
        costs,
        regions,
        posterior: dm.tables().clone(),
        start_errors: errors.at(0, t0),
        diagnostics: DesignDiagnostics {
            leakage: op.leakage().clone(),
            solver: report,
            epsilon,
            start_cost,
        },
    })
}
