//! Monte Carlo evaluation of sequential policies.
//!
//! Every trial draws a hypothesis, a parameter from its conditional prior
//! and observations until the policy stops. Trial `i` uses its own ChaCha
//! stream selected by `i` under the master seed, so results do not depend
//! on scheduling and aggregation runs in trial order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bellman::{evaluate_policy, Action, Coefficients, CostTables, PolicyAction};
use crate::coeffopt::{Constraints, DesignedTest};
use crate::error::{Error, Result};
use crate::grid::{interp_at, Axis, DiscretizedModel};
use crate::model::{Hypothesis, ProblemModel};
use crate::par;
use crate::table::Table;

/// A rule that, given the stage and statistic, continues or stops.
pub trait StoppingPolicy: Sync {
    fn horizon(&self) -> usize;
    fn act(&self, n: usize, t: f64) -> PolicyAction;
}

/// The optimal policy of a designed test.
pub struct DesignedPolicy<'a> {
    costs: &'a CostTables,
    dm: DiscretizedModel,
}

impl<'a> DesignedPolicy<'a> {
    pub fn new(test: &'a DesignedTest) -> Self {
        Self {
            costs: &test.costs,
            dm: test.discretized(),
        }
    }
}

impl StoppingPolicy for DesignedPolicy<'_> {
    fn horizon(&self) -> usize {
        self.costs.horizon()
    }

    fn act(&self, n: usize, t: f64) -> PolicyAction {
        evaluate_policy(self.costs, &self.dm, n, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub hypothesis: Hypothesis,
    pub theta: f64,
    pub decision: Hypothesis,
    pub estimate: f64,
    pub tau: usize,
    /// Ran into the horizon.
    pub truncated: bool,
    /// The statistic left the grid at some consulted stage.
    pub clamped: bool,
}

impl TrialOutcome {
    pub fn is_error(&self) -> bool {
        self.decision != self.hypothesis
    }

    pub fn squared_error(&self) -> f64 {
        (self.estimate - self.theta).powi(2)
    }
}

fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs one trial of `policy`, deterministic in `(seed, index)`.
pub fn run_trial<P: StoppingPolicy + ?Sized>(
    policy: &P,
    model: &ProblemModel,
    seed: u64,
    index: u64,
    forced: Option<Hypothesis>,
) -> TrialOutcome {
    let mut rng = trial_rng(seed, index);
    let hypothesis = forced.unwrap_or_else(|| {
        if rng.random::<f64>() < model.priors().p0() {
            Hypothesis::H0
        } else {
            Hypothesis::H1
        }
    });
    let theta = model.prior_sample(hypothesis, &mut rng);
    let horizon = policy.horizon();
    let mut t = model.statistic().t0;
    let mut clamped = false;
    let mut n = 0;
    loop {
        let step = policy.act(n, t);
        clamped |= step.clamped;
        match step.action {
            Action::Stop { decision, estimate } => {
                return TrialOutcome {
                    hypothesis,
                    theta,
                    decision,
                    estimate,
                    tau: n,
                    truncated: n == horizon,
                    clamped,
                }
            }
            Action::Continue => {
                let x = model.observation_sample(theta, &mut rng);
                t = model.statistic_update(n, t, x);
                n += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha0_se: f64,
    pub alpha1_se: f64,
    /// Mean squared error over trials that decided correctly.
    pub mse0: f64,
    pub mse1: f64,
    pub mse0_se: f64,
    pub mse1_se: f64,
    /// Squared error summed over correct decisions, divided by all trials
    /// under the hypothesis.
    pub weighted_mse0: f64,
    pub weighted_mse1: f64,
    pub mean_tau: f64,
    pub mean_tau_se: f64,
    pub mean_tau_h0: f64,
    pub mean_tau_h1: f64,
    pub truncation_rate: f64,
    pub clamped_rate: f64,
    /// `E[τ] + Σ p_i C_i (errors)`, when coefficients are known.
    pub objective: Option<f64>,
    pub trials_h0: usize,
    pub trials_h1: usize,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    trials: usize,
    errors: usize,
    correct: usize,
    sq: f64,
    sq2: f64,
    tau: f64,
}

/// Aggregates outcomes in order.
pub fn summarize(outcomes: &[TrialOutcome], seed: u64, c: Option<&Coefficients>) -> Result<SimulationReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptySimulation);
    }
    let mut tallies = [Tally::default(), Tally::default()];
    let (mut tau_sum, mut tau_sq, mut truncated, mut clamped) = (0.0, 0.0, 0usize, 0usize);
    for o in outcomes {
        let tally = &mut tallies[o.hypothesis.index()];
        tally.trials += 1;
        tally.tau += o.tau as f64;
        if o.is_error() {
            tally.errors += 1;
        } else {
            let e = o.squared_error();
            tally.correct += 1;
            tally.sq += e;
            tally.sq2 += e * e;
        }
        tau_sum += o.tau as f64;
        tau_sq += (o.tau as f64).powi(2);
        truncated += o.truncated as usize;
        clamped += o.clamped as usize;
    }
    let runs = outcomes.len();
    let ratio = |a: f64, b: usize| if b > 0 { a / b as f64 } else { f64::NAN };
    let alpha = tallies.clone().map(|t| ratio(t.errors as f64, t.trials));
    let alpha_se = [0, 1].map(|i| {
        let n = tallies[i].trials as f64;
        (alpha[i] * (1.0 - alpha[i]) / n).sqrt()
    });
    let mse = tallies.clone().map(|t| ratio(t.sq, t.correct));
    let mse_se = [0, 1].map(|i| {
        let t = &tallies[i];
        let n = t.correct as f64;
        let var = (t.sq2 / n - mse[i] * mse[i]).max(0.0) * n / (n - 1.0).max(1.0);
        (var / n).sqrt()
    });
    let weighted = tallies.clone().map(|t| ratio(t.sq, t.trials));
    let mean_tau = tau_sum / runs as f64;
    let tau_var = (tau_sq / runs as f64 - mean_tau * mean_tau).max(0.0);
    let p = [
        tallies[0].trials as f64 / runs as f64,
        tallies[1].trials as f64 / runs as f64,
    ];
    let objective = c.map(|c| {
        let c = c.0;
        let w = |v: f64| if v.is_nan() { 0.0 } else { v };
        mean_tau
            + p[0] * (c[0] * w(alpha[0]) + c[2] * w(weighted[0]))
            + p[1] * (c[1] * w(alpha[1]) + c[3] * w(weighted[1]))
    });
    Ok(SimulationReport {
        alpha0: alpha[0],
        alpha1: alpha[1],
        alpha0_se: alpha_se[0],
        alpha1_se: alpha_se[1],
        mse0: mse[0],
        mse1: mse[1],
        mse0_se: mse_se[0],
        mse1_se: mse_se[1],
        weighted_mse0: weighted[0],
        weighted_mse1: weighted[1],
        mean_tau,
        mean_tau_se: (tau_var / runs as f64).sqrt(),
        mean_tau_h0: ratio(tallies[0].tau, tallies[0].trials),
        mean_tau_h1: ratio(tallies[1].tau, tallies[1].trials),
        truncation_rate: truncated as f64 / runs as f64,
        clamped_rate: clamped as f64 / runs as f64,
        objective,
        trials_h0: tallies[0].trials,
        trials_h1: tallies[1].trials,
        runs,
        seed,
    })
}

/// Runs `runs` independent trials of `policy`.
pub fn simulate_policy<P: StoppingPolicy + ?Sized>(
    policy: &P,
    model: &ProblemModel,
    runs: usize,
    seed: u64,
) -> Result<Vec<TrialOutcome>> {
    if runs == 0 {
        return Err(Error::EmptySimulation);
    }
    Ok(par::map_indexed(runs, |i| run_trial(policy, model, seed, i as u64, None)))
}

pub fn monte_carlo(test: &DesignedTest, runs: usize, seed: u64) -> Result<SimulationReport> {
    let model = test.model.build()?;
    let policy = DesignedPolicy::new(test);
    let outcomes = simulate_policy(&policy, &model, runs, seed)?;
    summarize(&outcomes, seed, Some(&test.coefficients))
}

/// Truncated SPRT on the posterior odds followed by the MMSE estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SprtPolicy {
    pub upper: f64,
    pub lower: f64,
    priors: [f64; 2],
    t_axis: Axis,
    prob_h1: Table,
    mean: [Table; 2],
}

impl SprtPolicy {
    /// Likelihood ratio `p(t_n | H1) / p(t_n | H0)` at a grid node.
    pub fn likelihood_ratio(&self, n: usize, t: usize) -> f64 {
        self.odds(self.prob_h1.get(n, t))
    }

    fn odds(&self, e1: f64) -> f64 {
        e1 * self.priors[0] / ((1.0 - e1) * self.priors[1])
    }
}

impl StoppingPolicy for SprtPolicy {
    fn horizon(&self) -> usize {
        self.prob_h1.rows() - 1
    }

    fn act(&self, n: usize, t: f64) -> PolicyAction {
        let loc = self.t_axis.locate(t);
        let eta = self.odds(interp_at(self.prob_h1.row(n), &loc));
        let decision = if n == self.horizon() {
            Some(if eta > 1.0 { Hypothesis::H1 } else { Hypothesis::H0 })
        } else if eta >= self.upper {
            Some(Hypothesis::H1)
        } else if eta <= self.lower {
            Some(Hypothesis::H0)
        } else {
            None
        };
        let action = match decision {
            None => Action::Continue,
            Some(h) => Action::Stop {
                decision: h,
                estimate: interp_at(self.mean[h.index()].row(n), &loc),
            },
        };
        PolicyAction {
            action,
            clamped: loc.clamped,
        }
    }
}

/// Wald thresholds `A = (1-κ1)/κ0`, `B = κ1/(1-κ0)` on the tables of `dm`.
pub fn sprt_design(dm: &DiscretizedModel, k: &Constraints) -> Result<SprtPolicy> {
    let [k0, k1, _, _] = k.0;
    let upper = (1.0 - k1) / k0;
    let lower = k1 / (1.0 - k0);
    if !(upper > lower) {
        return Err(Error::InvalidConstraints(format!(
            "SPRT thresholds A = {upper} and B = {lower} leave no continuation band"
        )));
    }
    let tables = dm.tables();
    Ok(SprtPolicy {
        upper,
        lower,
        priors: tables.priors,
        t_axis: tables.t_axis,
        prob_h1: tables.prob[1].clone(),
        mean: tables.mean.clone(),
    })
}

pub fn sprt_monte_carlo(policy: &SprtPolicy, model: &ProblemModel, runs: usize, seed: u64) -> Result<SimulationReport> {
    let outcomes = simulate_policy(policy, model, runs, seed)?;
    summarize(&outcomes, seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build, Axis, GridSpec};
    use crate::model::make_shift_in_mean;

    fn setup() -> (ProblemModel, DiscretizedModel) {
        let model = make_shift_in_mean(4.0, 1.7, 1.0, 0.5).unwrap();
        let spec = GridSpec {
            x: Axis::new(-15.0, 15.0, 301).unwrap(),
            theta: Axis::new(-12.0, 12.0, 481).unwrap(),
            t: Axis::new(-8.0, 8.0, 161).unwrap(),
            horizon: 20,
        };
        let d = build(&model, &spec).unwrap();
        (model, d.model)
    }

    #[test]
    fn sprt_thresholds() {
        let (_, dm) = setup();
        let k = Constraints::new([0.05, 0.025, 0.35, 0.2]).unwrap();
        let p = sprt_design(&dm, &k).unwrap();
        assert!((p.upper - 19.5).abs() < 1e-12);
        assert!((p.lower - 0.025 / 0.95).abs() < 1e-12);
        assert!((p.likelihood_ratio(0, dm.t0_index()) - 1.0).abs() < 1e-12);
        let half = Constraints::new([0.5, 0.5, 0.35, 0.2]).unwrap();
        assert!(sprt_design(&dm, &half).is_err());
    }

    #[test]
    fn trials_are_deterministic_and_truncated() {
        let (model, dm) = setup();
        let k = Constraints::new([0.05, 0.025, 0.35, 0.2]).unwrap();
        let p = sprt_design(&dm, &k).unwrap();
        for i in 0..200 {
            let a = run_trial(&p, &model, 7, i, None);
            let b = run_trial(&p, &model, 7, i, None);
            assert_eq!(a, b);
            assert!(a.tau <= 20);
            let f = run_trial(&p, &model, 7, i, Some(Hypothesis::H0));
            assert!(f.theta < 0.0);
        }
    }

    #[test]
    fn estimates_are_interpolated_posterior_means() {
        let (model, dm) = setup();
        let k = Constraints::new([0.05, 0.025, 0.35, 0.2]).unwrap();
        let p = sprt_design(&dm, &k).unwrap();
        for i in 0..100 {
            let o = run_trial(&p, &model, 11, i, None);
            // Replay the statistic path to the stopping time.
            let mut rng = trial_rng(11, i);
            let _h: f64 = rng.random();
            let theta = model.prior_sample(o.hypothesis, &mut rng);
            assert_eq!(theta, o.theta);
            let mut t = 0.0;
            for n in 0..o.tau {
                t = model.statistic_update(n, t, model.observation_sample(theta, &mut rng));
            }
            let (expected, _) = dm
                .t_axis()
                .interpolate(dm.mean_table(o.decision).row(o.tau), t);
            assert_eq!(o.estimate, expected);
        }
    }

    #[test]
    fn report_matches_raw_outcomes() {
        let (model, dm) = setup();
        let k = Constraints::new([0.05, 0.025, 0.35, 0.2]).unwrap();
        let p = sprt_design(&dm, &k).unwrap();
        let outcomes = simulate_policy(&p, &model, 2000, 3).unwrap();
        let r = summarize(&outcomes, 3, None).unwrap();
        let h0: Vec<_> = outcomes.iter().filter(|o| o.hypothesis == Hypothesis::H0).collect();
        let errs = h0.iter().filter(|o| o.is_error()).count();
        assert_eq!(r.alpha0, errs as f64 / h0.len() as f64);
        assert_eq!(r.trials_h0 + r.trials_h1, 2000);
        let again = sprt_monte_carlo(&p, &model, 2000, 3).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
        assert!(matches!(sprt_monte_carlo(&p, &model, 0, 3), Err(Error::EmptySimulation)));
        assert!((0.0..=1.0).contains(&r.truncation_rate));
        assert!(r.mse0 >= 0.0 && r.mse1 >= 0.0);
    }
}
