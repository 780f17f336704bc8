//! Invariant suite for designed tests.
//!
//! [`verify`] rebuilds the discretization from the model and grid recorded
//! in a designed test and checks the stored tables against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bellman::{backward_induction, combined_stopping_cost, extract_regions, Coefficients, CostTables, Label, Regions};
use crate::coeffopt::{cost_sensitivities, error_tables, DesignedTest, ZERO_COEFFICIENT_RATIO};
use crate::error::Result;
use crate::grid::{build, Conditioning, Discretization, DiscretizedModel, TransitionOperator};
use crate::model::Hypothesis;
use crate::par;
use crate::table::Table;

pub const MACHINE_TOLERANCE: f64 = 1e-12;
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
pub const VARIANCE_TOLERANCE: f64 = 1e-3;
pub const SLACKNESS_TOLERANCE: f64 = 5e-3;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const SCALING_SAMPLES: usize = 10_000;
pub const SCALING_SEED: u64 = 0x1e_aa;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst measured deviation.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn within(name: &'static str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// Informational quantities that are not pass/fail.
    pub diagnostics: Vec<(&'static str, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Rebuilds the discretization of `test` and runs every check.
pub fn verify(test: &DesignedTest) -> Result<VerifyReport> {
    let problem = test.model.build()?;
    let disc = build(&problem, &test.grid)?;
    Ok(verify_on(test, &disc))
}

/// Runs every check against an existing discretization of `test`'s model.
pub fn verify_on(test: &DesignedTest, disc: &Discretization) -> VerifyReport {
    let dm = &disc.model;
    let op = &disc.transitions;
    let mut report = VerifyReport::default();
    let checks = &mut report.checks;

    let drift = posterior_drift(test, dm);
    checks.push(Check::within(
        "posterior tables match rebuild",
        drift,
        MACHINE_TOLERANCE,
        format!("max |stored - rebuilt| = {drift:e}"),
    ));
    if drift.is_infinite() {
        return report;
    }

    let scale = 1.0 + test.costs.rho.as_slice().iter().cloned().fold(0.0, f64::max);
    let residual = test.costs.bellman_residual(op) / scale;
    checks.push(Check::within(
        "bellman residual",
        residual,
        MACHINE_TOLERANCE,
        format!("max |rho - min(g, 1 + H rho')| / (1 + max rho) = {residual:e}"),
    ));

    let fresh = backward_induction(dm, op, &test.coefficients);
    let regions_match = extract_regions(&fresh) == test.regions;
    let cost_gap = cost_gap(&test.costs, &fresh) / scale;
    checks.push(Check {
        name: "costs reproduce at C*",
        passed: regions_match && cost_gap <= MACHINE_TOLERANCE,
        measured: cost_gap,
        tolerance: MACHINE_TOLERANCE,
        detail: format!("relative table gap {cost_gap:e}, regions match: {regions_match}"),
    });

    let (row_dev, rows) = row_sum_deviation(op);
    checks.push(Check::within(
        "transition rows sum to one",
        row_dev,
        ROW_SUM_TOLERANCE,
        format!("{rows} rows, max |sum - 1| = {row_dev:e}"),
    ));

    let violations = scaling_violations(dm, &test.coefficients, SCALING_SAMPLES, SCALING_SEED);
    checks.push(Check::within(
        "stopping cost scaling",
        violations as f64,
        0.0,
        format!("{violations} violations in {SCALING_SAMPLES} samples"),
    ));

    let excess = variance_excess(dm, op);
    checks.push(Check::within(
        "total variance contraction",
        excess,
        VARIANCE_TOLERANCE,
        format!("max E[Var_(n+1) | t_n, H] - Var_n = {excess:e}"),
    ));

    let errors = error_tables(dm, op, &test.regions);
    let t0 = dm.t0_index();
    let at = errors.at(0, t0);
    let c = test.coefficients.as_array();
    let floor = ZERO_COEFFICIENT_RATIO * test.coefficients.max();
    let kappa = test.constraints.as_array();
    let slack = (0..4)
        .filter(|&i| c[i] > floor)
        .map(|i| (at[i] - kappa[i]).abs())
        .fold(0.0, f64::max);
    checks.push(Check::within(
        "complementary slackness",
        slack,
        SLACKNESS_TOLERANCE,
        format!("errors {at:?} vs kappa {kappa:?} for nonzero C"),
    ));

    let sens = cost_sensitivities(dm, op, &test.regions);
    let exact = sens.each_ref().map(|s| s.get(0, t0));
    let (gap, flips) = gradient_gap(dm, op, test, exact);
    checks.push(Check::within(
        "cost gradient identity",
        gap,
        GRADIENT_TOLERANCE,
        format!("one-sided differences vs sensitivities {exact:?}, {flips} of 8 perturbations changed the regions"),
    ));

    let p = [dm.hypothesis_prior(Hypothesis::H0), dm.hypothesis_prior(Hypothesis::H1)];
    let predicted = [0, 1, 2, 3].map(|i| p[i % 2] * at[i]);
    let (gap, tested) = error_table_gap(dm, op, test, predicted);
    checks.push(Check::within(
        "error-table gradient identity",
        gap,
        GRADIENT_TOLERANCE,
        format!("central differences vs p * errors {predicted:?} on {tested} of 4 region-stable components"),
    ));

    let table_gap = (0..4)
        .map(|i| (exact[i] - predicted[i]).abs() / predicted[i].abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    report.diagnostics.push(("sensitivity vs error-table relative gap", table_gap));
    report.diagnostics.push(("integrability excess", integrability_excess(op, &test.costs)));
    report.diagnostics.push(("max coverage leak", op.leakage().max_coverage_leak));
    report.diagnostics.push(("max clamped mass", op.leakage().max_clamped_mass));
    report
}

fn table_gap(a: &Table, b: &Table) -> f64 {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return f64::INFINITY;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn posterior_drift(test: &DesignedTest, dm: &DiscretizedModel) -> f64 {
    let stored = &test.posterior;
    let rebuilt = dm.tables();
    if stored.t_axis != rebuilt.t_axis || stored.t0_index != rebuilt.t0_index {
        return f64::INFINITY;
    }
    let mut worst = (0..2)
        .map(|i| (stored.priors[i] - rebuilt.priors[i]).abs().max((stored.prior_var[i] - rebuilt.prior_var[i]).abs()))
        .fold(0.0, f64::max);
    for i in 0..2 {
        worst = worst
            .max(table_gap(&stored.prob[i], &rebuilt.prob[i]))
            .max(table_gap(&stored.mean[i], &rebuilt.mean[i]))
            .max(table_gap(&stored.var[i], &rebuilt.var[i]));
    }
    worst
}

fn cost_gap(a: &CostTables, b: &CostTables) -> f64 {
    [
        table_gap(&a.rho, &b.rho),
        table_gap(&a.g, &b.g),
        table_gap(&a.cont, &b.cont),
        table_gap(&a.stop0, &b.stop0),
        table_gap(&a.stop1, &b.stop1),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Largest `|Σ_s Ĥ(t, s) - 1|` over every stage and conditioning, and the
/// number of rows inspected.
pub fn row_sum_deviation(op: &TransitionOperator) -> (f64, usize) {
    let conds = [
        Conditioning::Unconditional,
        Conditioning::Given(Hypothesis::H0),
        Conditioning::Given(Hypothesis::H1),
    ];
    let mut worst = 0.0f64;
    let mut rows = 0;
    for n in 0..op.horizon() {
        for cond in conds {
            let m = op.matrix(n, cond);
            for r in 0..m.dim() {
                let (_, w) = m.row(r);
                worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            }
            rows += m.dim();
        }
    }
    (worst, rows)
}

/// Counts samples violating
/// `min(a0, a1, 1) g(t, e) <= g(t, a e) <= max(a0, a1, 1) g(t, e)`
/// at random nodes, weights `e` in `[0, 1]^2` and scales `a` in `[0, 4]^2`.
pub fn scaling_violations(dm: &DiscretizedModel, c: &Coefficients, samples: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..samples {
        let n = rng.random_range(0..=dm.horizon());
        let t = rng.random_range(0..dm.t_count());
        let e: [f64; 2] = [rng.random(), rng.random()];
        let a: [f64; 2] = [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)];
        let var = [dm.variance(Hypothesis::H0, n, t), dm.variance(Hypothesis::H1, n, t)];
        let base = combined_stopping_cost(c, e, var);
        let scaled = combined_stopping_cost(c, [a[0] * e[0], a[1] * e[1]], var);
        let lo = a[0].min(a[1]).min(1.0) * base;
        let hi = a[0].max(a[1]).max(1.0) * base;
        let slack = 1e-12 * (1.0 + hi.abs());
        if scaled < lo - slack || scaled > hi + slack {
            violations += 1;
        }
    }
    violations
}

/// Largest `E[Var(n+1) | t_n, H_i] - Var(n, t)` over the grid.
pub fn variance_excess(dm: &DiscretizedModel, op: &TransitionOperator) -> f64 {
    let per_stage = par::map_indexed(dm.horizon(), |n| {
        let mut worst = f64::NEG_INFINITY;
        for h in Hypothesis::BOTH {
            let next = dm.variance_table(h).row(n + 1);
            let m = op.matrix(n, Conditioning::Given(h));
            for t in 0..dm.t_count() {
                worst = worst.max(m.row_dot(t, next) - dm.variance(h, n, t));
            }
        }
        worst
    });
    per_stage.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest `E[g(n+1) | t_n] - min(D*_0, D*_1)(n, t)` over the grid.
pub fn integrability_excess(op: &TransitionOperator, costs: &CostTables) -> f64 {
    let per_stage = par::map_indexed(costs.horizon(), |n| {
        let m = op.matrix(n, Conditioning::Unconditional);
        (0..costs.t_count())
            .map(|t| m.row_dot(t, costs.g.row(n + 1)) - costs.stop0.get(n, t).min(costs.stop1.get(n, t)))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    per_stage.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Worst relative amount by which one-sided finite differences of `ρ(0, t0)`
/// in each `C_i` leave the bracket spanned by the exact sensitivities at
/// `C*` and at the perturbed point. `ρ(0, t0)` is concave in `C` and both
/// sensitivities are supergradients, so the bracket always contains the
/// difference quotient. Also returns how many perturbations changed the
/// regions.
fn gradient_gap(dm: &DiscretizedModel, op: &TransitionOperator, test: &DesignedTest, exact: [f64; 4]) -> (f64, usize) {
    let t0 = dm.t0_index();
    let c = test.coefficients;
    let base = backward_induction(dm, op, &c).rho.get(0, t0);
    let mut worst = 0.0f64;
    let mut flips = 0;
    for i in 0..4 {
        let h = 1e-4 * (1.0 + c.0[i]);
        for sign in [1.0, -1.0] {
            let mut moved = c;
            moved.0[i] += sign * h;
            if moved.0[i] < 0.0 {
                continue;
            }
            let costs = backward_induction(dm, op, &moved);
            let regions = extract_regions(&costs);
            let quotient = sign * (costs.rho.get(0, t0) - base) / h;
            let other = if regions == test.regions {
                exact[i]
            } else {
                flips += 1;
                cost_sensitivities(dm, op, &regions)[i].get(0, t0)
            };
            let (lo, hi) = (exact[i].min(other), exact[i].max(other));
            let scale = exact[i].abs().max(other.abs()).max(1e-12);
            let miss = (lo - quotient).max(quotient - hi).max(0.0) / scale;
            worst = worst.max(miss);
        }
    }
    (worst, flips)
}

/// Nodes visited with positive probability when the policy given by
/// `regions` is run from `t0`.
pub fn reachable(op: &TransitionOperator, regions: &Regions, t0: usize) -> Vec<Vec<bool>> {
    let nt = regions.t_count();
    let mut mass = vec![0.0; nt];
    mass[t0] = 1.0;
    let mut out = Vec::with_capacity(regions.horizon() + 1);
    for n in 0..=regions.horizon() {
        out.push(mass.iter().map(|&m| m > 0.0).collect());
        if n == regions.horizon() {
            break;
        }
        let moving: Vec<f64> = mass
            .iter()
            .zip(regions.row(n))
            .map(|(&m, &l)| if l == Label::Continue { m } else { 0.0 })
            .collect();
        mass = op.matrix(n, Conditioning::Unconditional).transpose_apply(&moving);
    }
    out
}

fn same_on(reach: &[Vec<bool>], a: &Regions, b: &Regions) -> bool {
    reach
        .iter()
        .enumerate()
        .all(|(n, row)| row.iter().enumerate().all(|(t, &r)| !r || a.get(n, t) == b.get(n, t)))
}

/// Worst relative gap between central differences of `ρ(0, t0)` and
/// `predicted`, over components whose perturbation keeps every reachable
/// label, and the number of components tested.
fn error_table_gap(dm: &DiscretizedModel, op: &TransitionOperator, test: &DesignedTest, predicted: [f64; 4]) -> (f64, usize) {
    let t0 = dm.t0_index();
    let reach = reachable(op, &test.regions, t0);
    let c = test.coefficients;
    let mut worst = 0.0f64;
    let mut tested = 0;
    for i in 0..4 {
        let h = 1e-4 * (1.0 + c.0[i]);
        let mut up = c;
        up.0[i] += h;
        let mut down = c;
        down.0[i] = (c.0[i] - h).max(0.0);
        let hi = backward_induction(dm, op, &up);
        let lo = backward_induction(dm, op, &down);
        if !same_on(&reach, &extract_regions(&hi), &test.regions) || !same_on(&reach, &extract_regions(&lo), &test.regions) {
            continue;
        }
        tested += 1;
        let fd = (hi.rho.get(0, t0) - lo.rho.get(0, t0)) / (up.0[i] - down.0[i]);
        worst = worst.max((fd - predicted[i]).abs() / predicted[i].abs().max(1e-12));
    }
    (worst, tested)
}
