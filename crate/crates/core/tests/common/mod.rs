#![allow(dead_code)]

use seqjde::bellman::Coefficients;
use seqjde::coeffopt::{assemble_lp, dual_ascent, solve_design_lp, AscentOutcome, Constraints, DesignOptions, LpSolution, SolverMethod};
use seqjde::grid::{Axis, DiscretizedModel, GridSpec, PosteriorTables, TransitionOperator};
use seqjde::model::ModelSpec;
use seqjde::table::Table;

pub const HORIZON: usize = 2;

/// Posterior probability of H1 at `(n, t)` on the two-node toy.
pub fn toy_e1(n: usize, t: usize) -> f64 {
    match (n, t) {
        (0, _) => 0.5,
        (_, 0) => 0.2,
        _ => 0.8,
    }
}

pub fn toy_var(h: usize, n: usize) -> f64 {
    (1.0 + h as f64) / (n + 1) as f64
}

/// Unconditional transition matrix of the toy at stage `n`.
pub fn toy_uncond(n: usize) -> [[f64; 2]; 2] {
    let h0 = [0.8, 0.2];
    let h1 = [0.2, 0.8];
    std::array::from_fn(|t| {
        let e1 = toy_e1(n, t);
        std::array::from_fn(|s| (1.0 - e1) * h0[s] + e1 * h1[s])
    })
}

/// Two-node statistic grid, horizon two, hand-set tables.
pub fn toy() -> (DiscretizedModel, TransitionOperator) {
    let rows = HORIZON + 1;
    let table = |f: &dyn Fn(usize, usize) -> f64| {
        Table::from_vec(rows, 2, (0..rows).flat_map(|n| (0..2).map(move |t| (n, t))).map(|(n, t)| f(n, t)).collect())
            .unwrap()
    };
    let tables = PosteriorTables {
        t_axis: Axis::new(0.0, 1.0, 2).unwrap(),
        t0_index: 0,
        priors: [0.5, 0.5],
        prior_var: [1.5, 2.5],
        prob: [table(&|n, t| 1.0 - toy_e1(n, t)), table(&|n, t| toy_e1(n, t))],
        mean: [table(&|_, _| -1.0), table(&|_, _| 1.0)],
        var: [table(&|n, _| toy_var(0, n)), table(&|n, _| toy_var(1, n))],
    };
    let dm = DiscretizedModel::from_tables(tables).unwrap();
    let stages = (0..HORIZON)
        .map(|n| {
            let u = toy_uncond(n);
            [
                u.iter().map(|r| r.to_vec()).collect(),
                vec![vec![0.8, 0.2]; 2],
                vec![vec![0.2, 0.8]; 2],
            ]
        })
        .collect();
    (dm, TransitionOperator::from_dense(stages))
}

pub fn toy_lp(kappa: [f64; 4]) -> LpSolution {
    let (dm, op) = toy();
    let fm = op.forward_marginals(dm.t0_index());
    let k = Constraints::new(kappa).unwrap();
    let lp = assemble_lp(&dm, &op, &fm, &k, 0.0).unwrap();
    solve_design_lp(&lp, 1e-10).unwrap()
}

pub fn toy_ascent(kappa: [f64; 4], start: Coefficients) -> seqjde::Result<AscentOutcome> {
    let (dm, op) = toy();
    let fm = op.forward_marginals(dm.t0_index());
    let k = Constraints::new(kappa).unwrap();
    let opts = DesignOptions {
        epsilon: Some(0.0),
        solver: SolverMethod::DualAscent,
        tol: 1e-9,
        max_iter: 2000,
    };
    dual_ascent(&dm, &op, &fm, &k, &start, &opts)
}

/// Componentwise relative agreement; components below `1e-6` of the larger
/// maximum count as zero on both sides.
pub fn close_coefficients(a: &Coefficients, b: &Coefficients, rel: f64) -> bool {
    let scale = a.max().max(b.max());
    (0..4).all(|i| {
        let (x, y) = (a.0[i], b.0[i]);
        (x - y).abs() <= rel * x.abs().max(y.abs()) || x.abs().max(y.abs()) <= 1e-6 * scale
    })
}

/// Independent backward recursion on the toy: `ρ_0(t0) - Σ p κ C`.
pub fn toy_dual(c: [f64; 4], kappa: [f64; 4]) -> f64 {
    let mut next = [0.0; 2];
    for n in (0..=HORIZON).rev() {
        let mut cur = [0.0; 2];
        for t in 0..2 {
            let e1 = toy_e1(n, t);
            let e0 = 1.0 - e1;
            let d0 = c[1] * e1 + c[2] * e0 * toy_var(0, n);
            let d1 = c[0] * e0 + c[3] * e1 * toy_var(1, n);
            let g = d0.min(d1);
            cur[t] = if n < HORIZON {
                let row = toy_uncond(n)[t];
                g.min(1.0 + row[0] * next[0] + row[1] * next[1])
            } else {
                g
            };
        }
        next = cur;
    }
    next[0] - 0.5 * (0..4).map(|i| c[i] * kappa[i]).sum::<f64>()
}

/// Lattice search for the maximum of `toy_dual`: an exhaustive pass over
/// `[0, hi]^4`, then passes over windows of ±8 spacings around the best
/// point at half the spacing, until the spacing falls below `resolution`.
pub fn lattice_max(kappa: [f64; 4], hi: f64, resolution: f64) -> ([f64; 4], f64) {
    const POINTS: usize = 33;
    let mut lo = [0.0; 4];
    let mut h = hi / (POINTS - 1) as f64;
    let mut best = ([0.0; 4], toy_dual([0.0; 4], kappa));
    loop {
        for idx in 0..POINTS.pow(4) {
            let mut c = [0.0; 4];
            let mut rest = idx;
            for i in 0..4 {
                c[i] = lo[i] + h * (rest % POINTS) as f64;
                rest /= POINTS;
            }
            let v = toy_dual(c, kappa);
            if v > best.1 {
                best = (c, v);
            }
        }
        if h < resolution {
            return best;
        }
        h /= 2.0;
        lo = best.0.map(|v| (v - 16.0 * h).max(0.0));
    }
}

pub fn shift_in_mean() -> ModelSpec {
    ModelSpec::ShiftInMean {
        sigma2: 4.0,
        gamma_shape: 1.7,
        gamma_scale: 1.0,
        p0: 0.5,
    }
}

pub fn small_grid(horizon: usize) -> GridSpec {
    GridSpec {
        x: Axis::new(-15.0, 15.0, 301).unwrap(),
        theta: Axis::new(-12.0, 12.0, 481).unwrap(),
        t: Axis::new(-8.0, 8.0, 161).unwrap(),
        horizon,
    }
}

/// A small designed test for round-trip and simulation checks.
pub fn small_design() -> &'static seqjde::coeffopt::DesignedTest {
    use seqjde::coeffopt::{design, Constraints, DesignOptions};
    static CELL: std::sync::OnceLock<seqjde::coeffopt::DesignedTest> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let k = Constraints::new([0.1, 0.1, 0.5, 0.5]).unwrap();
        design(&shift_in_mean(), &small_grid(10), &k, &DesignOptions::default()).unwrap()
    })
}
