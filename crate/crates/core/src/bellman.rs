//! Optimal stopping by backward induction.
//!
//! For coefficients `C` the cost of stopping at `(n, t)` and deciding `H_i`
//! is `C_{1-i} e_{1-i} + C_{2+i} e_i V_i`; the cost-to-go satisfies
//! `ρ_N = g` and `ρ_n = min(g_n, 1 + Ĥ_n ρ_{n+1})`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BandMatrix, Conditioning, DiscretizedModel, TransitionOperator};
use crate::model::Hypothesis;
use crate::par;
use crate::table::Table;

/// Cost coefficients `[C0, C1, C2, C3]`: wrong-decision costs for deciding
/// `H1` and `H0` respectively (`C0` multiplies `e0` in the cost of deciding
/// `H1`), then estimation weights under `H0` and `H1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coefficients(pub [f64; 4]);

impl Coefficients {
    pub fn new(c: [f64; 4]) -> Result<Self> {
        for (i, v) in c.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::ParameterDomain {
                    name: ["C0", "C1", "C2", "C3"][i],
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(Self(c))
    }

    pub fn zero() -> Self {
        Self([0.0; 4])
    }

    /// Weight on the posterior probability of `h` being true.
    pub fn detection(&self, h: Hypothesis) -> f64 {
        self.0[h.index()]
    }

    /// Weight on the posterior variance under `h`.
    pub fn estimation(&self, h: Hypothesis) -> f64 {
        self.0[2 + h.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }
}

/// `[D*_0, D*_1]` for posterior probabilities `e` and variances `var`.
#[inline]
pub fn decision_costs(c: &Coefficients, e: [f64; 2], var: [f64; 2]) -> [f64; 2] {
    [
        c.0[1] * e[1] + c.0[2] * e[0] * var[0],
        c.0[0] * e[0] + c.0[3] * e[1] * var[1],
    ]
}

/// `(D*_0, D*_1, g)` at a grid node.
pub fn stopping_costs(dm: &DiscretizedModel, c: &Coefficients, n: usize, t: usize) -> (f64, f64, f64) {
    let e = [dm.posterior(Hypothesis::H0, n, t), dm.posterior(Hypothesis::H1, n, t)];
    let v = [dm.variance(Hypothesis::H0, n, t), dm.variance(Hypothesis::H1, n, t)];
    let [d0, d1] = decision_costs(c, e, v);
    (d0, d1, d0.min(d1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTables {
    pub rho: Table,
    /// Continuation cost, rows `0..N`.
    pub cont: Table,
    pub stop0: Table,
    pub stop1: Table,
    pub g: Table,
}

impl CostTables {
    pub fn horizon(&self) -> usize {
        self.rho.rows() - 1
    }

    pub fn t_count(&self) -> usize {
        self.rho.cols()
    }

    pub fn stop(&self, h: Hypothesis) -> &Table {
        match h {
            Hypothesis::H0 => &self.stop0,
            Hypothesis::H1 => &self.stop1,
        }
    }

    /// Runs the recursion for explicit stopping-cost tables.
    pub fn from_stopping_costs(stop0: Table, stop1: Table, op: &TransitionOperator) -> Self {
        let (rows, nt) = (stop0.rows(), stop0.cols());
        let horizon = rows - 1;
        let g_data: Vec<f64> = stop0
            .as_slice()
            .iter()
            .zip(stop1.as_slice())
            .map(|(a, b)| a.min(*b))
            .collect();
        let g = Table::from_vec(rows, nt, g_data).expect("shape");
        let mut rho = Table::filled(rows, nt, 0.0);
        let mut cont = Table::filled(horizon, nt, 0.0);
        rho.row_mut(horizon).copy_from_slice(g.row(horizon));
        for n in (0..horizon).rev() {
            let (d, r) = bellman_step(
                op.matrix(n, Conditioning::Unconditional),
                g.row(n),
                rho.row(n + 1),
            );
            cont.row_mut(n).copy_from_slice(&d);
            rho.row_mut(n).copy_from_slice(&r);
        }
        Self {
            rho,
            cont,
            stop0,
            stop1,
            g,
        }
    }

    /// Largest `|ρ_n - min(g_n, 1 + Ĥ_n ρ_{n+1})|` and `|ρ_N - g_N|`.
    pub fn bellman_residual(&self, op: &TransitionOperator) -> f64 {
        let horizon = self.horizon();
        let mut worst = self
            .rho
            .row(horizon)
            .iter()
            .zip(self.g.row(horizon))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        for n in 0..horizon {
            let (_, r) = bellman_step(
                op.matrix(n, Conditioning::Unconditional),
                self.g.row(n),
                self.rho.row(n + 1),
            );
            for (a, b) in r.iter().zip(self.rho.row(n)) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// One backward step: `(d_n, ρ_n)` from `g_n` and `ρ_{n+1}`.
pub fn bellman_step(matrix: &BandMatrix, g: &[f64], rho_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pairs = par::map_indexed(g.len(), |t| {
        let d = 1.0 + matrix.row_dot(t, rho_next);
        (d, g[t].min(d))
    });
    pairs.into_iter().unzip()
}

pub fn backward_induction(dm: &DiscretizedModel, op: &TransitionOperator, c: &Coefficients) -> CostTables {
    let rows = dm.horizon() + 1;
    let nt = dm.t_count();
    let mut stop0 = Table::filled(rows, nt, 0.0);
    let mut stop1 = Table::filled(rows, nt, 0.0);
    for n in 0..rows {
        for t in 0..nt {
            let (d0, d1, _) = stopping_costs(dm, c, n, t);
            stop0.set(n, t, d0);
            stop1.set(n, t, d1);
        }
    }
    CostTables::from_stopping_costs(stop0, stop1, op)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Continue,
    StopH0,
    StopH1,
}

impl Label {
    pub fn code(self) -> &'static str {
        match self {
            Label::Continue => "C",
            Label::StopH0 => "S0",
            Label::StopH1 => "S1",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "C" => Some(Label::Continue),
            "S0" => Some(Label::StopH0),
            "S1" => Some(Label::StopH1),
            _ => None,
        }
    }

    pub fn stop_for(h: Hypothesis) -> Self {
        match h {
            Hypothesis::H0 => Label::StopH0,
            Hypothesis::H1 => Label::StopH1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    rows: usize,
    cols: usize,
    labels: Vec<Label>,
}

impl Regions {
    pub fn from_labels(rows: usize, cols: usize, labels: Vec<Label>) -> Option<Self> {
        (labels.len() == rows * cols).then_some(Self { rows, cols, labels })
    }

    pub fn horizon(&self) -> usize {
        self.rows - 1
    }

    pub fn t_count(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, n: usize, t: usize) -> Label {
        self.labels[n * self.cols + t]
    }

    pub fn row(&self, n: usize) -> &[Label] {
        &self.labels[n * self.cols..(n + 1) * self.cols]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }
}

#[inline]
fn classify(continuing: bool, d0: f64, d1: f64) -> Label {
    if continuing {
        Label::Continue
    } else if d0 <= d1 {
        Label::StopH0
    } else {
        Label::StopH1
    }
}

pub fn extract_regions(ct: &CostTables) -> Regions {
    let (rows, cols) = (ct.rho.rows(), ct.rho.cols());
    let horizon = rows - 1;
    let mut labels = Vec::with_capacity(rows * cols);
    for n in 0..rows {
        for t in 0..cols {
            let continuing = n < horizon && ct.g.get(n, t) > ct.cont.get(n, t);
            labels.push(classify(continuing, ct.stop0.get(n, t), ct.stop1.get(n, t)));
        }
    }
    Regions { rows, cols, labels }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Continue,
    Stop { decision: Hypothesis, estimate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    pub action: Action,
    /// The statistic lay outside the grid and was clamped to its boundary.
    pub clamped: bool,
}

impl PolicyAction {
    pub fn is_stop(&self) -> bool {
        matches!(self.action, Action::Stop { .. })
    }
}

/// Policy at an arbitrary statistic value by linear interpolation of the
/// cost tables and posterior means.
pub fn evaluate_policy(ct: &CostTables, dm: &DiscretizedModel, n: usize, t_value: f64) -> PolicyAction {
    let loc = dm.t_axis().locate(t_value);
    let at = |table: &Table, row: usize| crate::grid::interp_at(table.row(row), &loc);
    let continuing = n < ct.horizon() && at(&ct.g, n) > at(&ct.cont, n);
    let action = match classify(continuing, at(&ct.stop0, n), at(&ct.stop1, n)) {
        Label::Continue => Action::Continue,
        Label::StopH0 => Action::Stop {
            decision: Hypothesis::H0,
            estimate: at(dm.mean_table(Hypothesis::H0), n),
        },
        Label::StopH1 => Action::Stop {
            decision: Hypothesis::H1,
            estimate: at(dm.mean_table(Hypothesis::H1), n),
        },
    };
    PolicyAction {
        action,
        clamped: loc.clamped,
    }
}

/// `min{C1 e1 + C2 e0 V0, C0 e0 + C3 e1 V1}` for unnormalized weights `e`.
pub fn combined_stopping_cost(c: &Coefficients, e: [f64; 2], var: [f64; 2]) -> f64 {
    let [a, b] = decision_costs(c, e, var);
    a.min(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build, Axis, Discretization, GridSpec};
    use crate::model::make_shift_in_mean;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn small() -> &'static Discretization {
        static CELL: OnceLock<Discretization> = OnceLock::new();
        CELL.get_or_init(|| {
            let model = make_shift_in_mean(4.0, 1.7, 1.0, 0.5).unwrap();
            let spec = GridSpec {
                x: Axis::new(-15.0, 15.0, 751).unwrap(),
                theta: Axis::new(-12.0, 12.0, 601).unwrap(),
                t: Axis::new(-8.0, 8.0, 400).unwrap(),
                horizon: 10,
            };
            build(&model, &spec).unwrap()
        })
    }

    fn preset() -> Coefficients {
        Coefficients::new([125.1, 235.3, 14.9, 74.3]).unwrap()
    }

    #[test]
    fn zero_costs_give_zero_tables() {
        let d = small();
        let ct = backward_induction(&d.model, &d.transitions, &Coefficients::zero());
        assert!(ct.g.as_slice().iter().all(|&v| v == 0.0));
        assert!(ct.rho.as_slice().iter().all(|&v| v == 0.0));
        let r = extract_regions(&ct);
        assert!(r.labels().iter().all(|&l| l == Label::StopH0));
    }

    #[test]
    fn degenerate_posterior_costs() {
        let c = Coefficients::new([2.0, 3.0, 5.0, 7.0]).unwrap();
        let [d0, d1] = decision_costs(&c, [1.0, 0.0], [0.4, 9.0]);
        assert_eq!(d0, 5.0 * 0.4);
        assert_eq!(d1, 2.0);
    }

    #[test]
    fn preset_stopping_cost_at_origin() {
        let d = small();
        let (d0, d1, g) = stopping_costs(&d.model, &preset(), 0, d.model.t0_index());
        assert!((d0 - 130.3).abs() < 0.1, "{d0}");
        assert!((d1 - (0.5 * 125.1 + 0.5 * 74.3 * 1.7)).abs() < 0.5);
        assert_eq!(g, d0.min(d1));
    }

    #[test]
    fn rejects_negative_coefficients() {
        assert!(Coefficients::new([1.0, -1.0, 0.0, 0.0]).is_err());
        assert!(Coefficients::new([1.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    fn two_cell_op(h: [[f64; 2]; 2]) -> TransitionOperator {
        let m = || vec![h[0].to_vec(), h[1].to_vec()];
        TransitionOperator::from_dense(vec![[m(), m(), m()], [m(), m(), m()]])
    }

    #[test]
    fn two_cell_chain_matches_hand_recursion() {
        let op = two_cell_op([[0.7, 0.3], [0.2, 0.8]]);
        let s0 = Table::from_vec(3, 2, vec![5.0, 0.5, 3.0, 2.5, 1.0, 4.0]).unwrap();
        let s1 = Table::from_vec(3, 2, vec![4.0, 9.0, 6.0, 0.2, 2.0, 3.0]).unwrap();
        let ct = CostTables::from_stopping_costs(s0, s1, &op);
        // n = 2: g = (1, 3); n = 1: d = (2.6, 3.6), g = (3, 0.2) -> rho = (2.6, 0.2)
        // n = 0: d = (1 + 0.7*2.6 + 0.3*0.2, 1 + 0.2*2.6 + 0.8*0.2) = (2.88, 1.68)
        //        g = (4, 0.5) -> rho = (2.88, 0.5)
        let expect = [2.88, 0.5, 2.6, 0.2, 1.0, 3.0];
        for (a, b) in ct.rho.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((ct.cont.get(0, 1) - 1.68).abs() < 1e-12);
        let r = extract_regions(&ct);
        assert_eq!(r.row(2), &[Label::StopH0, Label::StopH1]);
        assert_eq!(r.row(1), &[Label::Continue, Label::StopH1]);
        assert_eq!(r.row(0), &[Label::Continue, Label::StopH0]);
        assert_eq!(ct.bellman_residual(&op), 0.0);
    }

    #[test]
    fn constant_cost_stops_immediately() {
        let op = two_cell_op([[0.5, 0.5], [0.1, 0.9]]);
        let c = 2.5;
        let ct = CostTables::from_stopping_costs(Table::filled(3, 2, c), Table::filled(3, 2, c), &op);
        assert!(ct.rho.as_slice().iter().all(|&v| v == c));
        assert!(ct.cont.as_slice().iter().all(|&v| (v - 1.0 - c).abs() < 1e-12));
        assert!(extract_regions(&ct).labels().iter().all(|&l| l == Label::StopH0));
    }

    #[test]
    fn boundary_and_tie_rules() {
        // Row 0 cell 0: g = 1 = d (ties stop); row 0 cell 1: D0 = D1 (tie -> H0).
        let s0 = Table::from_vec(2, 2, vec![1.0, 0.3, 0.0, 0.0]).unwrap();
        let s1 = Table::from_vec(2, 2, vec![1.5, 0.3, 0.0, 0.0]).unwrap();
        let m = || vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let op = TransitionOperator::from_dense(vec![[m(), m(), m()]]);
        let ct = CostTables::from_stopping_costs(s0, s1, &op);
        let r = extract_regions(&ct);
        assert_eq!(r.get(0, 0), Label::StopH0);
        assert_eq!(r.get(0, 1), Label::StopH0);
    }

    #[test]
    fn regions_and_policy_agree_on_the_grid() {
        let d = small();
        let dm = &d.model;
        let ct = backward_induction(dm, &d.transitions, &preset());
        let r = extract_regions(&ct);
        let n_max = dm.horizon();
        assert!(r.row(n_max).iter().all(|&l| l != Label::Continue));
        let ts = dm.t_axis().points();
        for n in 0..=n_max {
            for (t, &tv) in ts.iter().enumerate() {
                let a = evaluate_policy(&ct, dm, n, tv);
                assert!(!a.clamped);
                match (r.get(n, t), a.action) {
                    (Label::Continue, Action::Continue) => {}
                    (Label::StopH0, Action::Stop { decision: Hypothesis::H0, estimate }) => {
                        assert_eq!(estimate, dm.mean(Hypothesis::H0, n, t))
                    }
                    (Label::StopH1, Action::Stop { decision: Hypothesis::H1, estimate }) => {
                        assert_eq!(estimate, dm.mean(Hypothesis::H1, n, t))
                    }
                    (l, a) => panic!("({n}, {t}): {l:?} vs {a:?}"),
                }
                if r.get(n, t) != Label::Continue {
                    let stop = if r.get(n, t) == Label::StopH0 { &ct.stop0 } else { &ct.stop1 };
                    assert!(stop.get(n, t) <= ct.stop0.get(n, t).max(ct.stop1.get(n, t)));
                    assert_eq!(stop.get(n, t), ct.g.get(n, t));
                }
            }
        }
        // Midpoints between two continuing cells continue.
        for n in 0..n_max {
            for t in 0..ts.len() - 1 {
                if r.get(n, t) == Label::Continue && r.get(n, t + 1) == Label::Continue {
                    let mid = 0.5 * (ts[t] + ts[t + 1]);
                    assert_eq!(evaluate_policy(&ct, dm, n, mid).action, Action::Continue);
                }
            }
        }
        assert!(evaluate_policy(&ct, dm, n_max, 100.0).clamped);
        assert!(evaluate_policy(&ct, dm, n_max, 0.3).is_stop());
    }

    #[test]
    fn tables_are_consistent() {
        let d = small();
        let ct = backward_induction(&d.model, &d.transitions, &preset());
        assert_eq!(ct.bellman_residual(&d.transitions), 0.0);
        for (r, g) in ct.rho.as_slice().iter().zip(ct.g.as_slice()) {
            assert!(*r <= *g && *r >= 0.0);
        }
    }

    #[test]
    fn integrability_bound() {
        let d = small();
        let dm = &d.model;
        let ct = backward_induction(dm, &d.transitions, &preset());
        for n in 0..dm.horizon() {
            let h = d.transitions.matrix(n, Conditioning::Unconditional);
            for t in 0..dm.t_count() {
                let next = h.row_dot(t, ct.g.row(n + 1));
                assert!(next <= ct.stop0.get(n, t) + 1e-3, "({n},{t}) {next}");
                assert!(next <= ct.stop1.get(n, t) + 1e-3, "({n},{t}) {next}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bellman_step_is_monotone(
            bump in proptest::collection::vec(0.0f64..5.0, 400),
            n in 0usize..10,
            c in proptest::array::uniform4(0.0f64..300.0),
        ) {
            let d = small();
            let ct = backward_induction(&d.model, &d.transitions, &Coefficients(c));
            let hi: Vec<f64> = ct.rho.row(n + 1).iter().zip(&bump).map(|(a, b)| a + b).collect();
            let m = d.transitions.matrix(n, Conditioning::Unconditional);
            let (_, lo_row) = bellman_step(m, ct.g.row(n), ct.rho.row(n + 1));
            let (_, hi_row) = bellman_step(m, ct.g.row(n), &hi);
            for (a, b) in hi_row.iter().zip(&lo_row) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn cost_is_monotone_in_coefficients(
            c in proptest::array::uniform4(0.0f64..300.0),
            extra in 0.0f64..50.0,
            which in 0usize..4,
        ) {
            let d = small();
            let t0 = d.model.t0_index();
            let base = backward_induction(&d.model, &d.transitions, &Coefficients(c));
            let mut c2 = c;
            c2[which] += extra;
            let more = backward_induction(&d.model, &d.transitions, &Coefficients(c2));
            prop_assert!(more.rho.get(0, t0) >= base.rho.get(0, t0));
        }

        #[test]
        fn scaling_property(
            c in proptest::array::uniform4(0.0f64..300.0),
            e0 in 0.0f64..1.0,
            a in proptest::array::uniform2(0.0f64..20.0),
            v in proptest::array::uniform2(0.0f64..5.0),
        ) {
            let c = Coefficients(c);
            let e = [e0, 1.0 - e0];
            let base = combined_stopping_cost(&c, e, v);
            let scaled = combined_stopping_cost(&c, [a[0] * e[0], a[1] * e[1]], v);
            let lo = a[0].min(a[1]).min(1.0);
            let hi = a[0].max(a[1]).max(1.0);
            let slack = 1e-12 * (1.0 + base.abs() * hi);
            prop_assert!(lo * base <= scaled + slack);
            prop_assert!(scaled <= hi * base + slack);
        }
    }
}
