//! Two-hypothesis Bayesian models with a scalar random parameter.
//!
//! Under `H_i` the parameter `Θ` is drawn from a prior on `Λ_i` and the
//! observations are conditionally iid given `Θ`. Every model carries a
//! scalar sufficient statistic `t_n` with a recursive update
//! `t_{n+1} = ξ(n, t_n, x_{n+1})`, so posteriors only ever depend on `(n, t_n)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};
use libm::lgamma as ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

impl Hypothesis {
    pub const BOTH: [Hypothesis; 2] = [Hypothesis::H0, Hypothesis::H1];

    pub fn index(self) -> usize {
        match self {
            Hypothesis::H0 => 0,
            Hypothesis::H1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Hypothesis {
        if i == 0 {
            Hypothesis::H0
        } else {
            Hypothesis::H1
        }
    }

    pub fn other(self) -> Hypothesis {
        match self {
            Hypothesis::H0 => Hypothesis::H1,
            Hypothesis::H1 => Hypothesis::H0,
        }
    }
}

/// Prior probabilities of the two hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisPriors {
    p: [f64; 2],
}

impl HypothesisPriors {
    pub fn new(p0: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::ParameterDomain {
                name: "p0",
                reason: format!("must lie in (0, 1), got {p0}"),
            });
        }
        Ok(Self { p: [p0, 1.0 - p0] })
    }

    pub fn p0(&self) -> f64 {
        self.p[0]
    }

    pub fn p1(&self) -> f64 {
        self.p[1]
    }

    pub fn get(&self, h: Hypothesis) -> f64 {
        self.p[h.index()]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.p
    }
}

/// Closed-form prior family of the parameter under one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorFamily {
    /// `Θ ~ Gam(shape, scale)` on `[0, ∞)`.
    Gamma { shape: f64, scale: f64 },
    /// `-Θ ~ Gam(shape, scale)` on `(-∞, 0]`.
    NegatedGamma { shape: f64, scale: f64 },
    /// `Θ ~ U(lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// `Θ - shift ~ Gam(shape, scale)` on `[shift, ∞)`.
    ShiftedGamma { shape: f64, scale: f64, shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParameterPrior {
    family: PriorFamily,
}

fn gamma_ln_density(u: f64, shape: f64, scale: f64) -> f64 {
    if u < 0.0 {
        return f64::NEG_INFINITY;
    }
    if u == 0.0 {
        return if shape > 1.0 {
            f64::NEG_INFINITY
        } else if shape == 1.0 {
            -scale.ln()
        } else {
            f64::INFINITY
        };
    }
    (shape - 1.0) * u.ln() - u / scale - ln_gamma(shape) - shape * scale.ln()
}

impl ParameterPrior {
    pub fn new(family: PriorFamily) -> Self {
        Self { family }
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    /// Closed interval containing all prior mass; unbounded ends are infinite.
    pub fn support(&self) -> (f64, f64) {
        match self.family {
            PriorFamily::Gamma { .. } => (0.0, f64::INFINITY),
            PriorFamily::NegatedGamma { .. } => (f64::NEG_INFINITY, 0.0),
            PriorFamily::Uniform { lo, hi } => (lo, hi),
            PriorFamily::ShiftedGamma { shift, .. } => (shift, f64::INFINITY),
        }
    }

    pub fn ln_density(&self, theta: f64) -> f64 {
        match self.family {
            PriorFamily::Gamma { shape, scale } => gamma_ln_density(theta, shape, scale),
            PriorFamily::NegatedGamma { shape, scale } => gamma_ln_density(-theta, shape, scale),
            PriorFamily::Uniform { lo, hi } => {
                if theta >= lo && theta <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorFamily::ShiftedGamma {
                shape,
                scale,
                shift,
            } => gamma_ln_density(theta - shift, shape, scale),
        }
    }

    pub fn density(&self, theta: f64) -> f64 {
        self.ln_density(theta).exp()
    }

    pub fn mean(&self) -> f64 {
        match self.family {
            PriorFamily::Gamma { shape, scale } => shape * scale,
            PriorFamily::NegatedGamma { shape, scale } => -shape * scale,
            PriorFamily::Uniform { lo, hi } => 0.5 * (lo + hi),
            PriorFamily::ShiftedGamma {
                shape,
                scale,
                shift,
            } => shift + shape * scale,
        }
    }

    pub fn variance(&self) -> f64 {
        match self.family {
            PriorFamily::Gamma { shape, scale }
            | PriorFamily::NegatedGamma { shape, scale }
            | PriorFamily::ShiftedGamma { shape, scale, .. } => shape * scale * scale,
            PriorFamily::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
        }
    }

    pub fn second_moment(&self) -> f64 {
        self.variance() + self.mean().powi(2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            PriorFamily::Gamma { shape, scale } => gamma_draw(shape, scale, rng),
            PriorFamily::NegatedGamma { shape, scale } => -gamma_draw(shape, scale, rng),
            PriorFamily::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi)
                .expect("validated bounds")
                .sample(rng),
            PriorFamily::ShiftedGamma {
                shape,
                scale,
                shift,
            } => shift + gamma_draw(shape, scale, rng),
        }
    }
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, scale)
        .expect("validated gamma parameters")
        .sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// `t_n` is the running sample mean.
    SampleMean,
    /// `t_n` is the running mean of squared observations.
    MeanOfSquares,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatisticDef {
    pub t0: f64,
    pub kind: StatisticKind,
}

impl StatisticDef {
    /// `ξ(n, t, x)`: statistic after the `(n+1)`-th observation.
    pub fn update(&self, n: usize, t: f64, x: f64) -> f64 {
        let n = n as f64;
        match self.kind {
            StatisticKind::SampleMean => (n * t + x) / (n + 1.0),
            StatisticKind::MeanOfSquares => (n * t + x * x) / (n + 1.0),
        }
    }
}

/// Conditional law of a single observation given `Θ = θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservationModel {
    /// `X | θ ~ N(θ, sigma2)`.
    GaussianShift { sigma2: f64 },
    /// `X | θ ~ N(0, θ)`.
    GaussianScale,
}

impl ObservationModel {
    pub fn density(&self, x: f64, theta: f64) -> f64 {
        let (mean, var) = match *self {
            ObservationModel::GaussianShift { sigma2 } => (theta, sigma2),
            ObservationModel::GaussianScale => (0.0, theta),
        };
        if var <= 0.0 {
            return 0.0;
        }
        (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> f64 {
        let (mean, var) = match *self {
            ObservationModel::GaussianShift { sigma2 } => (theta, sigma2),
            ObservationModel::GaussianScale => (0.0, theta),
        };
        Normal::new(mean, var.sqrt())
            .expect("positive variance")
            .sample(rng)
    }
}

/// Serializable description of a shipped model family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    ShiftInMean {
        sigma2: f64,
        gamma_shape: f64,
        gamma_scale: f64,
        p0: f64,
    },
    ShiftInVariance {
        u_lo: f64,
        u_hi: f64,
        s2min: f64,
        gamma_shape: f64,
        gamma_scale: f64,
        p0: f64,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<ProblemModel> {
        match *self {
            ModelSpec::ShiftInMean {
                sigma2,
                gamma_shape,
                gamma_scale,
                p0,
            } => make_shift_in_mean(sigma2, gamma_shape, gamma_scale, p0),
            ModelSpec::ShiftInVariance {
                u_lo,
                u_hi,
                s2min,
                gamma_shape,
                gamma_scale,
                p0,
            } => make_shift_in_variance(u_lo, u_hi, s2min, gamma_shape, gamma_scale, p0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemModel {
    spec: ModelSpec,
    priors: HypothesisPriors,
    param_priors: [ParameterPrior; 2],
    observation: ObservationModel,
    statistic: StatisticDef,
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterDomain {
            name,
            reason: format!("must be positive and finite, got {v}"),
        })
    }
}

/// Gaussian observations with known variance; `-Θ₀ ~ Gam(a, b)`, `Θ₁ ~ Gam(a, b)`.
pub fn make_shift_in_mean(sigma2: f64, a: f64, b: f64, p0: f64) -> Result<ProblemModel> {
    positive("sigma2", sigma2)?;
    positive("gamma_shape", a)?;
    positive("gamma_scale", b)?;
    let priors = HypothesisPriors::new(p0)?;
    Ok(ProblemModel {
        spec: ModelSpec::ShiftInMean {
            sigma2,
            gamma_shape: a,
            gamma_scale: b,
            p0,
        },
        priors,
        param_priors: [
            ParameterPrior::new(PriorFamily::NegatedGamma { shape: a, scale: b }),
            ParameterPrior::new(PriorFamily::Gamma { shape: a, scale: b }),
        ],
        observation: ObservationModel::GaussianShift { sigma2 },
        statistic: StatisticDef {
            t0: 0.0,
            kind: StatisticKind::SampleMean,
        },
    })
}

/// Zero-mean Gaussian observations with random variance; `Θ₀ ~ U(u_lo, u_hi)`,
/// `Θ₁ - s2min ~ Gam(a, b)`.
pub fn make_shift_in_variance(
    u_lo: f64,
    u_hi: f64,
    s2min: f64,
    a: f64,
    b: f64,
    p0: f64,
) -> Result<ProblemModel> {
    positive("u_lo", u_lo)?;
    positive("gamma_shape", a)?;
    positive("gamma_scale", b)?;
    if !(u_hi > u_lo) || !u_hi.is_finite() {
        return Err(Error::ParameterDomain {
            name: "u_hi",
            reason: format!("must exceed u_lo = {u_lo}, got {u_hi}"),
        });
    }
    if !(s2min > u_hi) {
        return Err(Error::SupportOverlap {
            h0_hi: u_hi,
            h1_lo: s2min,
        });
    }
    let priors = HypothesisPriors::new(p0)?;
    Ok(ProblemModel {
        spec: ModelSpec::ShiftInVariance {
            u_lo,
            u_hi,
            s2min,
            gamma_shape: a,
            gamma_scale: b,
            p0,
        },
        priors,
        param_priors: [
            ParameterPrior::new(PriorFamily::Uniform { lo: u_lo, hi: u_hi }),
            ParameterPrior::new(PriorFamily::ShiftedGamma {
                shape: a,
                scale: b,
                shift: s2min,
            }),
        ],
        observation: ObservationModel::GaussianScale,
        statistic: StatisticDef {
            t0: 0.0,
            kind: StatisticKind::MeanOfSquares,
        },
    })
}

impl ProblemModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn priors(&self) -> HypothesisPriors {
        self.priors
    }

    pub fn param_prior(&self, h: Hypothesis) -> &ParameterPrior {
        &self.param_priors[h.index()]
    }

    pub fn observation(&self) -> ObservationModel {
        self.observation
    }

    pub fn statistic(&self) -> StatisticDef {
        self.statistic
    }

    pub fn statistic_update(&self, n: usize, t: f64, x: f64) -> f64 {
        self.statistic.update(n, t, x)
    }

    /// Log of the θ-profile of `∏ p(x_l | θ)` expressed through `(n, t)`.
    ///
    /// The omitted additive constant depends on `(n, t)` only and is the
    /// same under both hypotheses.
    pub fn statistic_log_likelihood(&self, n: usize, t: f64, theta: f64) -> Result<f64> {
        if n == 0 {
            return Err(Error::UndefinedLikelihood);
        }
        let n = n as f64;
        Ok(match self.observation {
            ObservationModel::GaussianShift { sigma2 } => -n * (t - theta).powi(2) / (2.0 * sigma2),
            ObservationModel::GaussianScale => {
                if theta <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -0.5 * n * theta.ln() - n * t / (2.0 * theta)
                }
            }
        })
    }

    pub fn statistic_likelihood(&self, n: usize, t: f64, theta: f64) -> Result<f64> {
        self.statistic_log_likelihood(n, t, theta).map(f64::exp)
    }

    pub fn prior_sample<R: Rng + ?Sized>(&self, h: Hypothesis, rng: &mut R) -> f64 {
        self.param_priors[h.index()].sample(rng)
    }

    pub fn observation_sample<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> f64 {
        self.observation.sample(theta, rng)
    }
}
