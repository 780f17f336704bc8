mod common;

use common::toy;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqjde::coeffopt::Constraints;
use seqjde::grid::{build, Axis, GridSpec};
use seqjde::model::{Hypothesis, ModelSpec};
use seqjde::simulate::sprt_design;
use seqjde::verify::row_sum_deviation;

fn mean_model(sigma2: f64, p0: f64) -> ModelSpec {
    ModelSpec::ShiftInMean {
        sigma2,
        gamma_shape: 1.7,
        gamma_scale: 1.0,
        p0,
    }
}

fn variance_model(p0: f64) -> ModelSpec {
    ModelSpec::ShiftInVariance {
        u_lo: 0.1,
        u_hi: 1.0,
        s2min: 1.3,
        gamma_shape: 1.7,
        gamma_scale: 0.5,
        p0,
    }
}

proptest! {
    #[test]
    fn hypothesis_priors_are_a_distribution(p0 in 0.01f64..0.99, sigma2 in 0.5f64..8.0) {
        for spec in [mean_model(sigma2, p0), variance_model(p0)] {
            let priors = spec.build().unwrap().priors();
            prop_assert!(priors.p0() > 0.0 && priors.p1() > 0.0);
            prop_assert!((priors.p0() + priors.p1() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_draws_and_density_respect_support(seed in any::<u64>(), theta in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in [mean_model(4.0, 0.5), variance_model(0.5)] {
            let model = spec.build().unwrap();
            for h in Hypothesis::BOTH {
                let prior = model.param_prior(h);
                let (lo, hi) = prior.support();
                let draw = model.prior_sample(h, &mut rng);
                prop_assert!(draw >= lo && draw <= hi);
                if theta < lo || theta > hi {
                    prop_assert_eq!(prior.density(theta), 0.0);
                }
            }
        }
    }

    #[test]
    fn statistic_updates_are_running_averages(n in 0usize..200, t in -10.0f64..10.0, x in -10.0f64..10.0) {
        let mean = mean_model(4.0, 0.5).build().unwrap();
        let expected = (n as f64 * t + x) / (n as f64 + 1.0);
        prop_assert!((mean.statistic_update(n, t, x) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        let variance = variance_model(0.5).build().unwrap();
        let expected = (n as f64 * t.abs() + x * x) / (n as f64 + 1.0);
        prop_assert!((variance.statistic_update(n, t.abs(), x) - expected).abs() <= 1e-12 * (1.0 + expected));
    }

    #[test]
    fn axis_points_and_location_are_consistent(
        lo in -100.0f64..100.0,
        width in 0.1f64..100.0,
        count in 2usize..500,
        u in 0.0f64..1.0,
    ) {
        let axis = Axis::new(lo, lo + width, count).unwrap();
        let k = ((count - 1) as f64 * u) as usize;
        prop_assert!((axis.point(k) - (lo + k as f64 * axis.step())).abs() <= 1e-9 * (1.0 + lo.abs() + width));
        let v = lo + u * width;
        let loc = axis.locate(v);
        prop_assert!(!loc.clamped);
        prop_assert!((0.0..=1.0).contains(&loc.frac));
        let back = axis.point(loc.index) + loc.frac * axis.step();
        prop_assert!((back - v).abs() <= 1e-9 * (1.0 + v.abs()));
        let line: Vec<f64> = axis.points().iter().map(|p| 3.0 * p - 1.0).collect();
        let (value, clamped) = axis.interpolate(&line, v);
        prop_assert!(!clamped);
        prop_assert!((value - (3.0 * v - 1.0)).abs() <= 1e-8 * (1.0 + v.abs()));
        prop_assert!(axis.locate(lo - 1.0).clamped && axis.locate(lo + width + 1.0).clamped);
    }

    #[test]
    fn sprt_thresholds_bracket_one(k0 in 0.001f64..0.5, k1 in 0.001f64..0.5) {
        let (dm, _) = toy();
        let policy = sprt_design(&dm, &Constraints::new([k0, k1, 1.0, 1.0]).unwrap()).unwrap();
        prop_assert!(policy.upper > 1.0 && 1.0 > policy.lower && policy.lower > 0.0);
    }

    #[test]
    fn constraints_reject_non_probability_bounds(k0 in 1.0f64..5.0, k in 0.01f64..0.99) {
        prop_assert!(Constraints::new([k0, k, k, k]).is_err());
        prop_assert!(Constraints::new([k, k0, k, k]).is_err());
        prop_assert!(Constraints::new([k, k, -k, k]).is_err());
        prop_assert!(Constraints::new([k, k, k0, k0]).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn discretization_invariants(
        sigma2 in 2.0f64..6.0,
        p0 in 0.2f64..0.8,
        nx in 151usize..241,
        nt in 41usize..81,
        horizon in 2usize..5,
    ) {
        let spec = GridSpec {
            x: Axis::new(-15.0, 15.0, nx).unwrap(),
            theta: Axis::new(-12.0, 12.0, 241).unwrap(),
            t: Axis::new(-8.0, 8.0, nt).unwrap(),
            horizon,
        };
        let disc = build(&mean_model(sigma2, p0).build().unwrap(), &spec).unwrap();
        let (dm, op) = (&disc.model, &disc.transitions);
        prop_assert!(row_sum_deviation(op).0 <= 1e-12);
        let marginals = op.forward_marginals(dm.t0_index());
        for n in 0..=horizon {
            let mu = marginals.stage(n);
            prop_assert!(mu.iter().all(|&m| m >= 0.0));
            prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for h in Hypothesis::BOTH {
                let total: f64 = (0..nt).map(|t| mu[t] * dm.posterior(h, n, t)).sum();
                prop_assert!((total - dm.hypothesis_prior(h)).abs() <= 2e-3, "n {} {:?}: {} vs {}", n, h, total, dm.hypothesis_prior(h));
            }
            for t in 0..nt {
                let e0 = dm.posterior(Hypothesis::H0, n, t);
                let e1 = dm.posterior(Hypothesis::H1, n, t);
                prop_assert!((e0 + e1 - 1.0).abs() <= 1e-12);
                prop_assert!(dm.variance(Hypothesis::H0, n, t) >= 0.0 && dm.variance(Hypothesis::H1, n, t) >= 0.0);
            }
        }
    }
}
