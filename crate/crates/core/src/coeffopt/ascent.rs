//! Projected supergradient ascent on the regularized dual objective.
//!
//! The objective is concave and piecewise linear in `C`, so the gradient is
//! only defined between kinks. Each iteration samples supergradients in a
//! small box around the iterate, moves along the minimum-norm element of
//! their convex hull (projected onto the feasible cone `C ≥ 0`) with a
//! backtracking line search, and shrinks the box when that element vanishes.
//! Gradients seen near the iterate stay in the bundle. The search ends once
//! the element falls below the tolerance on a box of half-width
//! `tol · (1 + max C)`.
//! Gradients seen near the iterate are kept in the bundle. The search ends
//! once the element falls below the tolerance on a box of half-width
//! `tol · (1 + max C)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{regularized_dual, Constraints, DesignOptions, SolverReport};
use crate::bellman::Coefficients;
use crate::error::{Error, Result};
use crate::grid::{DiscretizedModel, ForwardMarginals, TransitionOperator};

const SAMPLES: usize = 8;
const MEMORY: usize = 64;
const ARMIJO: f64 = 1e-4;
const MIN_RELATIVE_STEP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AscentOutcome {
    pub coefficients: Coefficients,
    pub objective: f64,
    /// Norm of the projected minimum-norm supergradient at termination.
    pub gradient_norm: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
    pub report: SolverReport,
}

fn project(c: [f64; 4]) -> [f64; 4] {
    c.map(|v| v.max(0.0))
}

/// Bounds within `slack` of zero, treated as active.
fn active_bounds(c: &[f64; 4], slack: f64) -> [bool; 4] {
    c.map(|v| v <= slack)
}

fn norm(v: &[f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn inf_norm(v: &[f64; 4]) -> f64 {
    v.iter().fold(0.0, |m, x| f64::max(m, x.abs()))
}

/// Steepest feasible ascent direction for the supergradients `points`:
/// the minimum-norm element of their convex hull plus the normal cone of
/// the `active` bounds `C_i ≥ 0`.
pub(crate) fn min_norm_hull(points: &[[f64; 4]], active: [bool; 4]) -> [f64; 4] {
    // The optimum never needs more than `2 R` along a cone direction, so the
    // cone can be replaced by a box and the sum by the hull of vertex sums.
    let reach = 4.0 * points.iter().map(norm).fold(0.0, f64::max);
    let axes: Vec<usize> = (0..4).filter(|&i| active[i]).collect();
    let mut generators = Vec::with_capacity(points.len() << axes.len());
    for p in points {
        for mask in 0..1usize << axes.len() {
            let mut q = *p;
            for (b, &i) in axes.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    q[i] += reach;
                }
            }
            generators.push(q);
        }
    }
    min_norm_point(&generators)
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| a[i] * b[i]).sum()
}

/// Wolfe's algorithm for the point of smallest norm in a polytope.
fn min_norm_point(points: &[[f64; 4]]) -> [f64; 4] {
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max);
    if scale == 0.0 {
        return [0.0; 4];
    }
    let combine = |set: &[usize], w: &[f64]| {
        let mut x = [0.0; 4];
        for (&j, &wj) in set.iter().zip(w) {
            for i in 0..4 {
                x[i] += wj * points[j][i];
            }
        }
        x
    };
    let first = (0..points.len())
        .min_by(|&a, &b| dot(&points[a], &points[a]).total_cmp(&dot(&points[b], &points[b])))
        .unwrap();
    let mut set = vec![first];
    let mut w = vec![1.0];
    let mut x = points[first];
    for _ in 0..1000 {
        let xx = dot(&x, &x);
        let (j, best) = (0..points.len())
            .map(|j| (j, dot(&x, &points[j])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if xx - best <= 1e-14 * scale || set.contains(&j) || set.len() == 5 {
            return x;
        }
        set.push(j);
        w.push(0.0);
        loop {
            let Some(alpha) = affine_minimizer(points, &set) else {
                set.pop();
                w.pop();
                return x;
            };
            if alpha.iter().all(|&a| a > 1e-14) {
                w = alpha;
                x = combine(&set, &w);
                break;
            }
            let theta = w
                .iter()
                .zip(&alpha)
                .filter(|(_, a)| **a <= 1e-14)
                .map(|(wi, a)| wi / (wi - a))
                .fold(1.0, f64::min);
            for (wi, a) in w.iter_mut().zip(&alpha) {
                *wi = theta * a + (1.0 - theta) * *wi;
            }
            let keep: Vec<bool> = w.iter().map(|wi| *wi > 1e-14).collect();
            let mut k = 0;
            set.retain(|_| {
                k += 1;
                keep[k - 1]
            });
            w.retain(|wi| *wi > 1e-14);
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|wi| *wi /= total);
            x = combine(&set, &w);
        }
    }
    x
}

/// Weights of the minimum-norm point of the affine hull of `set`, or `None`
/// when the points are affinely dependent.
fn affine_minimizer(points: &[[f64; 4]], set: &[usize]) -> Option<Vec<f64>> {
    let k = set.len();
    let n = k + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for r in 0..k {
        for c in 0..k {
            a[r][c] = dot(&points[set[r]], &points[set[c]]);
        }
        a[r][k] = 1.0;
        a[k][r] = 1.0;
    }
    a[k][n] = 1.0;
    let scale = a.iter().flat_map(|r| r[..n].iter()).fold(0.0, |m: f64, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|r| a[r][n] / a[r][r]).collect())
}

/// Maximizes the regularized dual objective starting from `c_init`.
pub fn dual_ascent(
    dm: &DiscretizedModel,
    op: &TransitionOperator,
    fm: &ForwardMarginals,
    k: &Constraints,
    c_init: &Coefficients,
    opts: &DesignOptions,
) -> Result<AscentOutcome> {
    let epsilon = opts.resolve_epsilon(dm, k)?;
    let tol = opts.tol.max(1e-12);
    let final_radius = tol;
    let eval = |c: [f64; 4]| {
        let p = regularized_dual(dm, op, fm, k, &Coefficients(c), epsilon);
        (p.value, p.gradient)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut c = project(c_init.0);
    let (mut value, mut grad) = eval(c);
    let mut history = vec![value];
    let mut radius = 1e-2 * (1.0 + c.iter().cloned().fold(0.0, f64::max));
    let mut step = 1.0;
    let mut direction = grad;
    let mut memory: Vec<([f64; 4], [f64; 4])> = Vec::new();

    for iteration in 0..opts.max_iter {
        let scale = 1.0 + c.iter().cloned().fold(0.0, f64::max);
        memory.retain(|(p, _)| (0..4).all(|i| (p[i] - c[i]).abs() <= radius));
        if memory.len() > MEMORY {
            memory.drain(..memory.len() - MEMORY);
        }
        let mut bundle = vec![grad];
        bundle.extend(memory.iter().map(|(_, g)| *g));
        for _ in 0..SAMPLES {
            let probe = project(std::array::from_fn(|i| c[i] + radius * rng.random_range(-1.0..=1.0)));
            let g = eval(probe).1;
            memory.push((probe, g));
            bundle.push(g);
        }
        direction = min_norm_hull(&bundle, active_bounds(&c, radius));
        let size = inf_norm(&direction);
        if size <= tol {
            if radius <= final_radius * scale {
                // Coefficients within the final box of zero are tried at zero.
                for i in 0..4 {
                    if c[i] > 0.0 && c[i] <= final_radius * scale {
                        let mut snapped = c;
                        snapped[i] = 0.0;
                        let v = eval(snapped).0;
                        if v >= value {
                            c = snapped;
                            value = v;
                        }
                    }
                }
                let start = regularized_dual(dm, op, fm, k, &Coefficients(c), epsilon).costs.rho.get(0, dm.t0_index());
                return Ok(finish(c, value, start, size, history, iteration));
            }
            radius *= 0.1;
            continue;
        }
        let unit = norm(&direction);
        let mut s = step;
        let mut accepted = false;
        let mut rejected = Vec::new();
        while s > MIN_RELATIVE_STEP * scale {
            let trial = project(std::array::from_fn(|i| c[i] + s * direction[i] / unit));
            let (v, g) = eval(trial);
            let gain: f64 = (0..4).map(|i| direction[i] * (trial[i] - c[i])).sum();
            if v >= value + ARMIJO * gain && gain > 0.0 {
                c = trial;
                value = v;
                grad = g;
                history.push(v);
                step = 2.0 * s;
                accepted = true;
                break;
            }
            rejected.push((trial, g));
            s *= 0.5;
        }
        if !accepted {
            // Some piece active near the iterate is missing from the bundle.
            let mut novel = false;
            for (trial, g) in rejected {
                if bundle.iter().all(|b| (0..4).any(|i| (b[i] - g[i]).abs() > 1e-12)) {
                    bundle.push(g);
                    memory.push((trial, g));
                    novel = true;
                }
            }
            if !novel {
                radius *= 0.1;
            }
            step = radius;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        gradient_norm: inf_norm(&direction),
        last: c,
    })
}

fn finish(
    c: [f64; 4],
    value: f64,
    start_cost: f64,
    gradient_norm: f64,
    history: Vec<f64>,
    iterations: usize,
) -> AscentOutcome {
    let top = c.iter().cloned().fold(0.0, f64::max);
    let c = c.map(|v| if v < super::ZERO_COEFFICIENT_RATIO * top { 0.0 } else { v });
    AscentOutcome {
        coefficients: Coefficients(c),
        objective: value,
        gradient_norm,
        report: SolverReport {
            method: "dual_ascent".into(),
            status: "Converged".into(),
            iterations,
            primal_residual: 0.0,
            dual_residual: gradient_norm,
            max_violation: 0.0,
            objective: value,
            solver_start_value: start_cost,
        },
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_norm_of_opposite_vectors_is_zero() {
        let d = min_norm_hull(&[[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]], [false; 4]);
        assert!(inf_norm(&d) < 1e-12);
        let d = min_norm_hull(&[[1.0, 1.0, 0.0, 0.0], [1.0, -1.0, 0.0, 0.0]], [false; 4]);
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);
        // The active bound absorbs the second vector's pull below zero.
        let d = min_norm_hull(&[[0.0, 1.0, 0.0, 0.0], [1.0, -1.0, 0.0, 0.0]], [false, true, false, false]);
        assert!((d[0] - 0.4).abs() < 1e-9 && (d[1] - 0.2).abs() < 1e-9);
        let d = min_norm_hull(&[[1.0, -1.0, 0.0, 0.0]], [false, true, false, false]);
        assert_eq!(d, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn min_norm_point_of_a_triangle() {
        // Nearest point of the triangle to the origin lies on the edge.
        let d = min_norm_point(&[[1.0, 1.0, 0.0, 0.0], [1.0, -1.0, 0.0, 0.0], [3.0, 0.0, 1.0, 0.0]]);
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
        let simplex = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let d = min_norm_point(&simplex);
        assert!(d.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let mut around = simplex.to_vec();
        around.extend(simplex.iter().map(|p| p.map(|v| -v)));
        assert!(norm(&min_norm_point(&around)) < 1e-14);
    }
}
