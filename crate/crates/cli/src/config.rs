//! Run configuration file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use seqjde::coeffopt::{Constraints, DesignOptions, SolverMethod};
use seqjde::grid::GridSpec;
use seqjde::model::ModelSpec;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub constraints: ConstraintBlock,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub kappa: [f64; 4],
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
    DesignOptions::default().solver
}

fn default_tol() -> f64 {
    DesignOptions::default().tol
}

fn default_max_iter() -> usize {
    DesignOptions::default().max_iter
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub artifact: Option<PathBuf>,
    #[serde(default)]
    pub regions: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError {
    pub path: PathBuf,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() || self.field == "." {
            write!(f, "{}: {}", self.path.display(), self.message)
        } else {
            write!(f, "{}: field `{}`: {}", self.path.display(), self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let fail = |field: &str, message: String| ConfigError {
            path: path.to_path_buf(),
            field: field.to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail("", e.to_string()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let config: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| fail(&e.path().to_string(), e.inner().to_string()))?;
        config.validate().map_err(|(field, message)| fail(field, message))?;
        Ok(config)
    }

    /// Semantic checks that need no grid: domains of the model parameters,
    /// axes, constraints and solver settings.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        self.model.build().map_err(|e| ("model", e.to_string()))?;
        for (name, axis) in [("grid.x", &self.grid.x), ("grid.theta", &self.grid.theta), ("grid.t", &self.grid.t)] {
            axis.validate(name).map_err(|e| (name, e.to_string()))?;
        }
        if self.grid.horizon < 1 {
            return Err(("grid.horizon", "must be at least 1".into()));
        }
        self.constraints()
            .map_err(|e| ("constraints.kappa", e.to_string()))?;
        let c = &self.constraints;
        if let Some(eps) = c.epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(("constraints.epsilon", format!("must be a non-negative number, got {eps}")));
            }
        }
        if !(c.tol > 0.0 && c.tol.is_finite()) {
            return Err(("constraints.tol", format!("must be positive, got {}", c.tol)));
        }
        if c.max_iter == 0 {
            return Err(("constraints.max_iter", "must be at least 1".into()));
        }
        if self.runs == Some(0) {
            return Err(("runs", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn constraints(&self) -> seqjde::Result<Constraints> {
        Constraints::new(self.constraints.kappa)
    }

    pub fn design_options(&self) -> DesignOptions {
        let c = &self.constraints;
        DesignOptions {
            epsilon: c.epsilon,
            solver: c.solver,
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }
}
