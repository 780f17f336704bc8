//! Regular-grid discretization of the observation, parameter and statistic
//! spaces.
//!
//! [`build`] computes, for every stage `n` and statistic node `t`, the
//! posterior hypothesis probabilities, the per-hypothesis posterior means and
//! variances, and three row-stochastic transition operators for the
//! statistic: the unconditional one `Ĥ_n` and the `H_i`-conditional ones
//! `Ĥ_n^i`. All integrals over `θ` and `x` use the trapezoidal rule.
//!
//! Transition rows push the posterior predictive of `x_{n+1}` through
//! `ξ(n, t, ·)` and split each mass between the two neighbouring statistic
//! nodes by linear interpolation. Images outside the statistic axis are
//! clamped to the boundary node and counted in a [`LeakageReport`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hypothesis, HypothesisPriors, ProblemModel};
use crate::par;
use crate::table::Table;

/// Largest predictive mass a row may lose off the observation axis.
pub const COVERAGE_TOLERANCE: f64 = 1e-3;

/// Posterior quadrature weights below this fraction of the peak are skipped
/// when forming predictives.
const POSTERIOR_CUTOFF: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    #[serde(rename = "n")]
    pub count: usize,
}

/// Position of a real value relative to an [`Axis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    /// Left node of the bracketing cell.
    pub index: usize,
    /// Weight of the right node, in `[0, 1]`.
    pub frac: f64,
    pub clamped: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let axis = Self { lo, hi, count };
        axis.validate("axis")?;
        Ok(axis)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.count < 2 {
            return Err(Error::InvalidGrid(format!(
                "{name}: needs at least 2 points, got {}",
                self.count
            )));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "{name}: bounds must satisfy lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.count - 1) as f64
    }

    #[inline]
    pub fn point(&self, k: usize) -> f64 {
        if k + 1 == self.count {
            self.hi
        } else {
            self.lo + k as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|k| self.point(k)).collect()
    }

    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let h = self.step();
        let mut w = vec![h; self.count];
        w[0] = 0.5 * h;
        w[self.count - 1] = 0.5 * h;
        w
    }

    pub fn nearest(&self, v: f64) -> usize {
        let k = ((v - self.lo) / self.step()).round();
        k.clamp(0.0, (self.count - 1) as f64) as usize
    }

    pub fn locate(&self, v: f64) -> Location {
        if v.is_nan() || v <= self.lo {
            return Location {
                index: 0,
                frac: 0.0,
                clamped: v.is_nan() || v < self.lo,
            };
        }
        if v >= self.hi {
            return Location {
                index: self.count - 2,
                frac: 1.0,
                clamped: v > self.hi,
            };
        }
        let pos = (v - self.lo) / self.step();
        let nearest = pos.round();
        if (pos - nearest).abs() < 1e-9 {
            let k = nearest as usize;
            return if k + 1 >= self.count {
                Location {
                    index: self.count - 2,
                    frac: 1.0,
                    clamped: false,
                }
            } else {
                Location {
                    index: k,
                    frac: 0.0,
                    clamped: false,
                }
            };
        }
        let index = (pos.floor() as usize).min(self.count - 2);
        let frac = (pos - index as f64).clamp(0.0, 1.0);
        Location {
            index,
            frac,
            clamped: false,
        }
    }

    /// Linear interpolation of nodal `values` at `v`.
    pub fn interpolate(&self, values: &[f64], v: f64) -> (f64, bool) {
        let loc = self.locate(v);
        (interp_at(values, &loc), loc.clamped)
    }
}

#[inline]
pub(crate) fn interp_at(values: &[f64], loc: &Location) -> f64 {
    let a = values[loc.index];
    if loc.frac == 0.0 {
        return a;
    }
    let b = values[loc.index + 1];
    if loc.frac == 1.0 {
        return b;
    }
    a + loc.frac * (b - a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x: Axis,
    pub theta: Axis,
    pub t: Axis,
    pub horizon: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.x.validate("x")?;
        self.theta.validate("theta")?;
        self.t.validate("t")?;
        if self.horizon < 1 {
            return Err(Error::InvalidGrid("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which measure a transition row is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Unconditional,
    Given(Hypothesis),
}

impl Conditioning {
    fn slot(self) -> usize {
        match self {
            Conditioning::Unconditional => 0,
            Conditioning::Given(h) => 1 + h.index(),
        }
    }
}

/// Square sparse matrix whose rows have contiguous column support.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    dim: usize,
    starts: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl BandMatrix {
    fn from_rows(dim: usize, rows: Vec<(usize, Vec<f64>)>) -> Self {
        let mut starts = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let total = rows.iter().map(|(_, v)| v.len()).sum();
        let mut values = Vec::with_capacity(total);
        offsets.push(0);
        for (start, v) in rows {
            starts.push(start);
            values.extend_from_slice(&v);
            offsets.push(values.len());
        }
        Self {
            dim,
            starts,
            offsets,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// First column and stored weights of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (usize, &[f64]) {
        (self.starts[r], &self.values[self.offsets[r]..self.offsets[r + 1]])
    }

    pub fn dense_row(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let (s, w) = self.row(r);
        out[s..s + w.len()].copy_from_slice(w);
        out
    }

    #[inline]
    pub fn row_dot(&self, r: usize, v: &[f64]) -> f64 {
        let (s, w) = self.row(r);
        w.iter().zip(&v[s..s + w.len()]).map(|(a, b)| a * b).sum()
    }

    /// `out = Mᵀ · mu`.
    pub fn transpose_apply(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (r, &m) in mu.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let (s, w) = self.row(r);
            for (o, &wk) in out[s..s + w.len()].iter_mut().zip(w) {
                *o += m * wk;
            }
        }
        out
    }
}

/// Mass bookkeeping for the discretized transitions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Largest predictive mass lost off the observation axis in any row.
    pub max_coverage_leak: f64,
    /// Largest mass whose statistic image fell outside the statistic axis.
    pub max_clamped_mass: f64,
    /// Rows whose clamped mass exceeds [`COVERAGE_TOLERANCE`].
    pub clamped_rows: usize,
    /// Worst clamped rows as `(n, t_index, mass)`.
    pub worst_clamped: Vec<(usize, usize, f64)>,
}

/// Per-stage transition operators `Ĥ_n`, `Ĥ_n^0`, `Ĥ_n^1` for `n < N`.
#[derive(Debug, Clone)]
pub struct TransitionOperator {
    stages: Vec<[BandMatrix; 3]>,
    leakage: LeakageReport,
}

impl TransitionOperator {
    /// Builds an operator from explicit dense matrices (`stages[n][slot]`
    /// with slots unconditional, H0, H1). Rows are renormalized.
    pub fn from_dense(stages: Vec<[Vec<Vec<f64>>; 3]>) -> Self {
        let stages = stages
            .into_iter()
            .map(|mats| {
                mats.map(|m| {
                    let dim = m.len();
                    let rows = m
                        .into_iter()
                        .map(|mut row| {
                            let s: f64 = row.iter().sum();
                            row.iter_mut().for_each(|v| *v /= s);
                            (0, row)
                        })
                        .collect();
                    BandMatrix::from_rows(dim, rows)
                })
            })
            .collect();
        Self {
            stages,
            leakage: LeakageReport::default(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn leakage(&self) -> &LeakageReport {
        &self.leakage
    }

    pub fn matrix(&self, n: usize, cond: Conditioning) -> &BandMatrix {
        &self.stages[n][cond.slot()]
    }

    pub fn transition_row(&self, n: usize, t_index: usize, cond: Conditioning) -> Result<Vec<f64>> {
        if n >= self.stages.len() {
            return Err(Error::NoTransition(n));
        }
        Ok(self.stages[n][cond.slot()].dense_row(t_index))
    }

    /// Forward laws of `t_n` started from a point mass at `t0_index`.
    pub fn forward_marginals(&self, t0_index: usize) -> ForwardMarginals {
        let dim = self.stages.first().map_or(t0_index + 1, |s| s[0].dim());
        let mut mu0 = vec![0.0; dim];
        mu0[t0_index] = 1.0;
        let mut marginals = vec![mu0];
        for stage in &self.stages {
            let next = stage[0].transpose_apply(marginals.last().unwrap());
            marginals.push(next);
        }
        ForwardMarginals { marginals }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardMarginals {
    marginals: Vec<Vec<f64>>,
}

impl ForwardMarginals {
    pub fn stage(&self, n: usize) -> &[f64] {
        &self.marginals[n]
    }

    pub fn stages(&self) -> usize {
        self.marginals.len()
    }
}

/// Posterior summaries on the `(n, t)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTables {
    pub t_axis: Axis,
    pub t0_index: usize,
    /// `[p(H0), p(H1)]`.
    pub priors: [f64; 2],
    /// `Var[Θ | H_i]`.
    pub prior_var: [f64; 2],
    /// `p(H_i | t_n)`.
    pub prob: [Table; 2],
    /// `E[Θ | t_n, H_i]`.
    pub mean: [Table; 2],
    /// `Var[Θ | t_n, H_i]`.
    pub var: [Table; 2],
}

#[derive(Debug, Clone)]
struct Quadrature {
    model: ProblemModel,
    spec: GridSpec,
    theta_points: Vec<f64>,
    theta_weights: Vec<f64>,
    prior_grid: [Vec<f64>; 2],
}

/// Posterior tables on the `(n, t)` grid, plus the quadrature they came
/// from when built from a [`ProblemModel`].
#[derive(Debug, Clone)]
pub struct DiscretizedModel {
    tables: PosteriorTables,
    quadrature: Option<Quadrature>,
}

/// Predictive densities of the next observation over the `x` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub mixture: Vec<f64>,
    pub conditional: [Vec<f64>; 2],
}

impl DiscretizedModel {
    /// Wraps explicit tables (no predictive densities available).
    pub fn from_tables(tables: PosteriorTables) -> Result<Self> {
        let (rows, cols) = (tables.prob[0].rows(), tables.prob[0].cols());
        if rows < 2 || cols != tables.t_axis.count || tables.t0_index >= cols {
            return Err(Error::InvalidGrid("posterior tables do not match the t axis".into()));
        }
        for t in tables.prob.iter().chain(&tables.mean).chain(&tables.var) {
            if t.rows() != rows || t.cols() != cols {
                return Err(Error::InvalidGrid("posterior tables differ in shape".into()));
            }
        }
        HypothesisPriors::new(tables.priors[0])?;
        Ok(Self {
            tables,
            quadrature: None,
        })
    }

    pub fn tables(&self) -> &PosteriorTables {
        &self.tables
    }

    pub fn model(&self) -> Option<&ProblemModel> {
        self.quadrature.as_ref().map(|q| &q.model)
    }

    pub fn spec(&self) -> Option<&GridSpec> {
        self.quadrature.as_ref().map(|q| &q.spec)
    }

    pub fn t_axis(&self) -> &Axis {
        &self.tables.t_axis
    }

    pub fn horizon(&self) -> usize {
        self.tables.prob[0].rows() - 1
    }

    pub fn t_count(&self) -> usize {
        self.tables.t_axis.count
    }

    pub fn t0_index(&self) -> usize {
        self.tables.t0_index
    }

    pub fn hypothesis_prior(&self, h: Hypothesis) -> f64 {
        self.tables.priors[h.index()]
    }

    /// `Var[Θ | H_i]` under the gridded prior.
    pub fn prior_variance(&self, h: Hypothesis) -> f64 {
        self.tables.prior_var[h.index()]
    }

    /// Normalized gridded prior density of `Θ | H_i`.
    pub fn prior_grid(&self, h: Hypothesis) -> Option<&[f64]> {
        self.quadrature.as_ref().map(|q| &q.prior_grid[h.index()][..])
    }

    /// `p(H_i | t_n)`.
    #[inline]
    pub fn posterior(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.tables.prob[h.index()].get(n, t)
    }

    /// `E[Θ | t_n, H_i]`.
    #[inline]
    pub fn mean(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.tables.mean[h.index()].get(n, t)
    }

    /// `Var[Θ | t_n, H_i]`.
    #[inline]
    pub fn variance(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.tables.var[h.index()].get(n, t)
    }

    /// `p(t_n | H_i) / p(t_n)`.
    #[inline]
    pub fn likelihood_ratio_weight(&self, h: Hypothesis, n: usize, t: usize) -> f64 {
        self.posterior(h, n, t) / self.hypothesis_prior(h)
    }

    pub fn posterior_table(&self, h: Hypothesis) -> &Table {
        &self.tables.prob[h.index()]
    }

    pub fn mean_table(&self, h: Hypothesis) -> &Table {
        &self.tables.mean[h.index()]
    }

    pub fn variance_table(&self, h: Hypothesis) -> &Table {
        &self.tables.var[h.index()]
    }

    /// Predictive densities `p(x_{n+1} | t_n)` and `p(x_{n+1} | t_n, H_i)`
    /// over the observation grid, recomputed on demand.
    pub fn predictive(&self, n: usize, t_index: usize) -> Option<Predictive> {
        let q = self.quadrature.as_ref()?;
        let post = posterior_point(q, n, q.spec.t.point(t_index));
        let xs = q.spec.x.points();
        let obs = q.model.observation();
        let conditional = [0, 1].map(|i| {
            let (lo, w) = &post.weights[i];
            xs.iter()
                .map(|&x| {
                    w.iter()
                        .enumerate()
                        .map(|(k, &wk)| wk * obs.density(x, q.theta_points[lo + k]))
                        .sum()
                })
                .collect::<Vec<f64>>()
        });
        let mixture = (0..xs.len())
            .map(|j| post.e[0] * conditional[0][j] + post.e[1] * conditional[1][j])
            .collect();
        Some(Predictive {
            mixture,
            conditional,
        })
    }
}

/// Output of [`build`].
#[derive(Debug, Clone)]
pub struct Discretization {
    pub model: DiscretizedModel,
    pub transitions: TransitionOperator,
    pub marginals: ForwardMarginals,
}

struct PosteriorPoint {
    e: [f64; 2],
    mean: [f64; 2],
    var: [f64; 2],
    /// Normalized posterior quadrature weights on a θ index window.
    weights: [(usize, Vec<f64>); 2],
}

fn posterior_from_logs(theta: &[f64], logs: [&[f64]; 2], lo: [usize; 2], ln_p: [f64; 2]) -> PosteriorPoint {
    let mut ln_evidence = [f64::NEG_INFINITY; 2];
    let mut mean = [0.0; 2];
    let mut var = [0.0; 2];
    let mut weights: [(usize, Vec<f64>); 2] = [(0, Vec::new()), (0, Vec::new())];
    for i in 0..2 {
        let l = logs[i];
        let peak = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = l.iter().map(|&v| (v - peak).exp()).collect();
        let s: f64 = w.iter().sum();
        ln_evidence[i] = peak + s.ln();
        let first = w.iter().position(|&v| v >= POSTERIOR_CUTOFF).unwrap_or(0);
        let last = w.iter().rposition(|&v| v >= POSTERIOR_CUTOFF).unwrap_or(0);
        let window: Vec<f64> = w[first..=last].iter().map(|v| v / s).collect();
        let th = &theta[lo[i] + first..=lo[i] + last];
        let m: f64 = window.iter().zip(th).map(|(a, b)| a * b).sum();
        let v: f64 = window.iter().zip(th).map(|(a, b)| a * (b - m).powi(2)).sum();
        mean[i] = m;
        var[i] = v.max(0.0);
        weights[i] = (lo[i] + first, window);
    }
    let a0 = ln_p[0] + ln_evidence[0];
    let a1 = ln_p[1] + ln_evidence[1];
    let e0 = if a0 == f64::NEG_INFINITY {
        0.0
    } else if a1 == f64::NEG_INFINITY {
        1.0
    } else {
        1.0 / (1.0 + (a1 - a0).exp())
    };
    PosteriorPoint {
        e: [e0, 1.0 - e0],
        mean,
        var,
        weights,
    }
}

/// θ-index window of each prior's grid support.
fn prior_windows(prior_grid: &[Vec<f64>; 2]) -> [(usize, usize); 2] {
    [0, 1].map(|i| {
        let g = &prior_grid[i];
        let first = g.iter().position(|&v| v > 0.0).unwrap_or(0);
        let last = g.iter().rposition(|&v| v > 0.0).unwrap_or(0);
        (first, last)
    })
}

fn posterior_point(q: &Quadrature, n: usize, t: f64) -> PosteriorPoint {
    let wins = prior_windows(&q.prior_grid);
    let p = q.model.priors().as_array();
    let logs: [Vec<f64>; 2] = [0, 1].map(|i| {
        let (a, b) = wins[i];
        (a..=b)
            .map(|k| {
                let prior = q.prior_grid[i][k] * q.theta_weights[k];
                if prior <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let ll = if n == 0 {
                    0.0
                } else {
                    q.model
                        .statistic_log_likelihood(n, t, q.theta_points[k])
                        .expect("n >= 1")
                };
                ll + prior.ln()
            })
            .collect()
    });
    posterior_from_logs(
        &q.theta_points,
        [&logs[0], &logs[1]],
        [wins[0].0, wins[1].0],
        [p[0].ln(), p[1].ln()],
    )
}

struct NodeResult {
    e: [f64; 2],
    mean: [f64; 2],
    var: [f64; 2],
    /// Unconditional, H0, H1 rows (already normalized) or `None` at `n = N`.
    rows: Option<[(usize, Vec<f64>); 3]>,
    coverage_leak: f64,
    clamped: f64,
}

/// Trapezoid-normalized prior densities on the θ grid.
fn grid_priors(model: &ProblemModel, theta: &Axis) -> Result<[Vec<f64>; 2]> {
    let pts = theta.points();
    let w = theta.trapezoid_weights();
    let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for h in Hypothesis::BOTH {
        let prior = model.param_prior(h);
        let mut dens: Vec<f64> = pts
            .iter()
            .map(|&th| {
                let d = prior.density(th);
                if d.is_finite() {
                    d
                } else {
                    0.0
                }
            })
            .collect();
        let mass: f64 = dens.iter().zip(&w).map(|(a, b)| a * b).sum();
        let support = dens.iter().filter(|&&d| d > 0.0).count();
        if support < 2 || !(0.9..=1.1).contains(&mass) {
            return Err(Error::InvalidGrid(format!(
                "theta axis [{}, {}] does not cover the {:?} prior (grid mass {mass:.4}, {support} nodes)",
                theta.lo, theta.hi, h
            )));
        }
        dens.iter_mut().for_each(|d| *d /= mass);
        out[h.index()] = dens;
    }
    Ok(out)
}

/// Discretizes `model` on `spec`.
pub fn build(model: &ProblemModel, spec: &GridSpec) -> Result<Discretization> {
    spec.validate()?;
    let prior_grid = grid_priors(model, &spec.theta)?;
    let theta_points = spec.theta.points();
    let t0_index = spec.t.nearest(model.statistic().t0);
    let nt = spec.t.count;
    let horizon = spec.horizon;

    let theta_weights = spec.theta.trapezoid_weights();
    let prior_var = [0, 1].map(|i| {
        let w = &theta_weights;
        let m: f64 = (0..theta_points.len())
            .map(|k| prior_grid[i][k] * w[k] * theta_points[k])
            .sum();
        (0..theta_points.len())
            .map(|k| prior_grid[i][k] * w[k] * (theta_points[k] - m).powi(2))
            .sum::<f64>()
    });

    let q = Quadrature {
        model: model.clone(),
        spec: *spec,
        theta_points,
        theta_weights,
        prior_grid,
    };
    let blank = || [Table::filled(horizon + 1, nt, 0.0), Table::filled(horizon + 1, nt, 0.0)];
    let mut tables = PosteriorTables {
        t_axis: spec.t,
        t0_index,
        priors: model.priors().as_array(),
        prior_var,
        prob: blank(),
        mean: blank(),
        var: blank(),
    };

    let kernel = ObservationKernel::new(&q);
    // Stage 0 does not depend on t: every node carries the prior.
    let stage0 = node(&q, &kernel, 0, t0_index);
    let results: Vec<NodeResult> = par::map_indexed((horizon + 1) * nt, |idx| {
        let (n, t) = (idx / nt, idx % nt);
        if n == 0 {
            NodeResult {
                e: stage0.e,
                mean: stage0.mean,
                var: stage0.var,
                rows: stage0.rows.clone(),
                coverage_leak: stage0.coverage_leak,
                clamped: stage0.clamped,
            }
        } else {
            node(&q, &kernel, n, t)
        }
    });

    let mut leakage = LeakageReport::default();
    let mut offenders = Vec::new();
    let mut clamped_all = Vec::new();
    let mut stage_rows: Vec<[Vec<(usize, Vec<f64>)>; 3]> =
        (0..horizon).map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect();
    for (idx, r) in results.into_iter().enumerate() {
        let (n, t) = (idx / nt, idx % nt);
        for i in 0..2 {
            tables.prob[i].set(n, t, r.e[i]);
            tables.mean[i].set(n, t, r.mean[i]);
            tables.var[i].set(n, t, r.var[i]);
        }
        if let Some(rows) = r.rows {
            leakage.max_coverage_leak = leakage.max_coverage_leak.max(r.coverage_leak);
            leakage.max_clamped_mass = leakage.max_clamped_mass.max(r.clamped);
            if r.coverage_leak > COVERAGE_TOLERANCE {
                offenders.push((n, t, r.coverage_leak));
            }
            if r.clamped > COVERAGE_TOLERANCE {
                leakage.clamped_rows += 1;
            }
            if r.clamped > 0.0 {
                clamped_all.push((n, t, r.clamped));
            }
            for (slot, row) in rows.into_iter().enumerate() {
                stage_rows[n][slot].push(row);
            }
        }
    }
    if !offenders.is_empty() {
        offenders.sort_by(|a, b| b.2.total_cmp(&a.2));
        let count = offenders.len();
        offenders.truncate(10);
        return Err(Error::GridCoverage {
            tolerance: COVERAGE_TOLERANCE,
            count,
            offenders,
        });
    }
    clamped_all.sort_by(|a, b| b.2.total_cmp(&a.2));
    clamped_all.truncate(10);
    leakage.worst_clamped = clamped_all;

    let stages = stage_rows
        .into_iter()
        .map(|rows| rows.map(|r| BandMatrix::from_rows(nt, r)))
        .collect();
    let transitions = TransitionOperator { stages, leakage };
    let marginals = transitions.forward_marginals(t0_index);
    Ok(Discretization {
        model: DiscretizedModel {
            tables,
            quadrature: Some(q),
        },
        transitions,
        marginals,
    })
}

/// `p(x_j | θ_k)` on the grid, row-major in θ.
struct ObservationKernel {
    nx: usize,
    values: Vec<f64>,
    x_weights: Vec<f64>,
    x_points: Vec<f64>,
}

impl ObservationKernel {
    fn new(q: &Quadrature) -> Self {
        let xs = q.spec.x.points();
        let obs = q.model.observation();
        let nx = xs.len();
        let mut values = vec![0.0; q.theta_points.len() * nx];
        par::for_each_indexed_mut(&mut values, |idx, v| {
            *v = obs.density(xs[idx % nx], q.theta_points[idx / nx]);
        });
        Self {
            nx,
            values,
            x_weights: q.spec.x.trapezoid_weights(),
            x_points: xs,
        }
    }

    fn predictive(&self, weights: &(usize, Vec<f64>)) -> Vec<f64> {
        let (lo, w) = weights;
        let mut out = vec![0.0; self.nx];
        for (k, &wk) in w.iter().enumerate() {
            if wk < POSTERIOR_CUTOFF * 1e-3 {
                continue;
            }
            let row = &self.values[(lo + k) * self.nx..(lo + k + 1) * self.nx];
            for (o, &kv) in out.iter_mut().zip(row) {
                *o += wk * kv;
            }
        }
        out
    }
}

fn node(q: &Quadrature, kernel: &ObservationKernel, n: usize, t_index: usize) -> NodeResult {
    let t = q.spec.t.point(t_index);
    let post = posterior_point(q, n, t);
    if n == q.spec.horizon {
        return NodeResult {
            e: post.e,
            mean: post.mean,
            var: post.var,
            rows: None,
            coverage_leak: 0.0,
            clamped: 0.0,
        };
    }
    let stat = q.model.statistic();
    let t_axis = &q.spec.t;
    let nt = t_axis.count;
    let preds = [kernel.predictive(&post.weights[0]), kernel.predictive(&post.weights[1])];

    // Raw conditional rows; the unconditional row is their e-weighted sum.
    let mut raw = [vec![0.0; nt], vec![0.0; nt]];
    let mut mass = [0.0; 2];
    let mut clamped = [0.0; 2];
    let (mut first, mut last) = (nt, 0usize);
    for j in 0..kernel.nx {
        let t_next = stat.update(n, t, kernel.x_points[j]);
        let loc = t_axis.locate(t_next);
        let touch_hi = if loc.frac > 0.0 { loc.index + 1 } else { loc.index };
        let touch_lo = if loc.frac < 1.0 { loc.index } else { loc.index + 1 };
        for i in 0..2 {
            let m = preds[i][j] * kernel.x_weights[j];
            if m == 0.0 {
                continue;
            }
            mass[i] += m;
            if loc.clamped {
                clamped[i] += m;
            }
            raw[i][loc.index] += m * (1.0 - loc.frac);
            raw[i][loc.index + 1] += m * loc.frac;
            first = first.min(touch_lo);
            last = last.max(touch_hi);
        }
    }
    if first > last {
        first = t_index;
        last = t_index;
    }
    let band = |v: &[f64], scale: f64| -> (usize, Vec<f64>) {
        (first, v[first..=last].iter().map(|x| x / scale).collect())
    };
    let mix: Vec<f64> = (0..nt)
        .map(|k| post.e[0] * raw[0][k] + post.e[1] * raw[1][k])
        .collect();
    let mix_mass = post.e[0] * mass[0] + post.e[1] * mass[1];
    let safe = |m: f64| if m > 0.0 { m } else { 1.0 };
    let coverage_leak = [1.0 - mass[0], 1.0 - mass[1], 1.0 - mix_mass]
        .into_iter()
        .fold(0.0, f64::max);
    let clamped_mix = (post.e[0] * clamped[0] + post.e[1] * clamped[1]) / safe(mix_mass);
    NodeResult {
        e: post.e,
        mean: post.mean,
        var: post.var,
        rows: Some([
            band(&mix, safe(mix_mass)),
            band(&raw[0], safe(mass[0])),
            band(&raw[1], safe(mass[1])),
        ]),
        coverage_leak,
        clamped: clamped_mix,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_shift_in_mean, make_shift_in_variance};

    fn small_mean() -> Discretization {
        let model = make_shift_in_mean(4.0, 1.7, 1.0, 0.5).unwrap();
        let spec = GridSpec {
            x: Axis::new(-15.0, 15.0, 301).unwrap(),
            theta: Axis::new(-12.0, 12.0, 481).unwrap(),
            t: Axis::new(-8.0, 8.0, 81).unwrap(),
            horizon: 8,
        };
        build(&model, &spec).unwrap()
    }

    #[test]
    fn axis_locate_and_interpolate() {
        let a = Axis::new(0.0, 1.0, 11).unwrap();
        let loc = a.locate(0.25);
        assert_eq!(loc.index, 2);
        assert!((loc.frac - 0.5).abs() < 1e-12);
        assert!(a.locate(-1.0).clamped);
        assert!(a.locate(2.0).clamped);
        assert!(!a.locate(1.0).clamped);
        let vals: Vec<f64> = a.points().iter().map(|p| 3.0 * p).collect();
        assert!((a.interpolate(&vals, 0.37).0 - 1.11).abs() < 1e-12);
        assert!(Axis::new(1.0, 0.0, 5).is_err());
        assert!(Axis::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn stage_zero_is_the_prior() {
        let d = small_mean();
        let dm = &d.model;
        let t0 = dm.t0_index();
        assert!((dm.posterior(Hypothesis::H0, 0, t0) - 0.5).abs() < 1e-12);
        assert!((dm.posterior(Hypothesis::H1, 0, t0) - 0.5).abs() < 1e-12);
        // The θ axis truncates the gamma tail beyond 12.
        assert!((dm.variance(Hypothesis::H1, 0, t0) - 1.7).abs() < 1e-2);
        assert!((dm.variance(Hypothesis::H1, 0, 17) - 1.7).abs() < 1e-2);
        for h in Hypothesis::BOTH {
            assert!((dm.likelihood_ratio_weight(h, 0, t0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_identities_hold_pointwise() {
        let d = small_mean();
        let dm = &d.model;
        for n in 0..=dm.horizon() {
            for t in 0..dm.t_count() {
                let e0 = dm.posterior(Hypothesis::H0, n, t);
                let e1 = dm.posterior(Hypothesis::H1, n, t);
                assert!((e0 + e1 - 1.0).abs() < 1e-15);
                for h in Hypothesis::BOTH {
                    assert_eq!(
                        dm.likelihood_ratio_weight(h, n, t),
                        dm.posterior(h, n, t) / dm.hypothesis_prior(h)
                    );
                    assert!(dm.variance(h, n, t) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let d = small_mean();
        for n in 0..d.model.horizon() {
            for cond in [
                Conditioning::Unconditional,
                Conditioning::Given(Hypothesis::H0),
                Conditioning::Given(Hypothesis::H1),
            ] {
                for t in 0..d.model.t_count() {
                    let row = d.transitions.transition_row(n, t, cond).unwrap();
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(
            d.transitions.transition_row(d.model.horizon(), 0, Conditioning::Unconditional),
            Err(Error::NoTransition(_))
        ));
    }

    #[test]
    fn predictive_mixture_identity() {
        let d = small_mean();
        let dm = &d.model;
        for &(n, t) in &[(0, 40), (1, 30), (3, 55), (7, 10)] {
            let p = dm.predictive(n, t).unwrap();
            let e0 = dm.posterior(Hypothesis::H0, n, t);
            let e1 = dm.posterior(Hypothesis::H1, n, t);
            for j in 0..p.mixture.len() {
                let rhs = e0 * p.conditional[0][j] + e1 * p.conditional[1][j];
                assert!((p.mixture[j] - rhs).abs() < 1e-9);
            }
            let w = dm.spec().unwrap().x.trapezoid_weights();
            let mass: f64 = p.mixture.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
        }
    }

    #[test]
    fn transition_mean_matches_quadrature() {
        let d = small_mean();
        let dm = &d.model;
        let xs = dm.spec().unwrap().x.points();
        let w = dm.spec().unwrap().x.trapezoid_weights();
        let ts = dm.t_axis().points();
        for &(n, t) in &[(1usize, 40usize), (2, 35), (5, 47)] {
            let row = d
                .transitions
                .transition_row(n, t, Conditioning::Unconditional)
                .unwrap();
            let via_row: f64 = row.iter().zip(&ts).map(|(a, b)| a * b).sum();
            let p = dm.predictive(n, t).unwrap();
            let mass: f64 = p.mixture.iter().zip(&w).map(|(a, b)| a * b).sum();
            let direct: f64 = (0..xs.len())
                .map(|j| p.mixture[j] * w[j] * dm.model().unwrap().statistic_update(n, ts[t], xs[j]))
                .sum::<f64>()
                / mass;
            assert!((via_row - direct).abs() < 1e-6, "{via_row} vs {direct}");
        }
    }

    #[test]
    fn narrow_observation_axis_reports_coverage() {
        let model = make_shift_in_mean(4.0, 1.7, 1.0, 0.5).unwrap();
        let spec = GridSpec {
            x: Axis::new(0.3, 0.31, 2).unwrap(),
            theta: Axis::new(-12.0, 12.0, 241).unwrap(),
            t: Axis::new(-2.0, 2.0, 41).unwrap(),
            horizon: 2,
        };
        assert!(matches!(build(&model, &spec), Err(Error::GridCoverage { .. })));
    }

    #[test]
    fn forward_marginals_conserve_mass_and_prior() {
        let d = small_mean();
        let dm = &d.model;
        let fm = &d.marginals;
        let row0 = d
            .transitions
            .transition_row(0, dm.t0_index(), Conditioning::Unconditional)
            .unwrap();
        assert_eq!(fm.stage(1), &row0[..]);
        for n in 0..=dm.horizon() {
            let mu = fm.stage(n);
            assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for h in Hypothesis::BOTH {
                let total: f64 = (0..dm.t_count())
                    .map(|t| mu[t] * dm.posterior(h, n, t))
                    .sum();
                assert!((total - dm.hypothesis_prior(h)).abs() < 2e-3, "n={n} {total}");
            }
        }
    }

    #[test]
    fn posterior_variance_contracts_in_expectation() {
        let d = small_mean();
        let dm = &d.model;
        for n in 0..dm.horizon() {
            for t in 5..dm.t_count() - 5 {
                for h in Hypothesis::BOTH {
                    let next = dm.variance_table(h).row(n + 1);
                    let expected = d.transitions.matrix(n, Conditioning::Given(h)).row_dot(t, next);
                    assert!(expected <= dm.variance(h, n, t) + 1e-3);
                }
            }
        }
    }

    #[test]
    fn variance_model_builds_with_log_space_posteriors() {
        let model = make_shift_in_variance(0.1, 1.0, 1.3, 1.7, 0.5, 0.5).unwrap();
        let spec = GridSpec {
            x: Axis::new(-20.0, 20.0, 401).unwrap(),
            theta: Axis::new(0.01, 60.0, 601).unwrap(),
            t: Axis::new(0.0, 25.0, 101).unwrap(),
            horizon: 5,
        };
        let d = build(&model, &spec).unwrap();
        let dm = &d.model;
        // Large mean of squares after many samples is decisive for H1.
        assert!(dm.posterior(Hypothesis::H1, 5, 80) > 0.999);
        assert!(dm.posterior(Hypothesis::H0, 5, 0) > 0.99);
        for t in 0..dm.t_count() {
            assert!(dm.mean(Hypothesis::H0, 5, t) >= 0.1 - 1e-9);
            assert!(dm.mean(Hypothesis::H1, 5, t) >= 1.3);
        }
    }
}
