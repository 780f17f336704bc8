//! Versioned JSON artifacts for designed tests.
//!
//! Tables are stored flat in row-major order next to their `[rows, cols]`
//! shape; region labels use the codes `C`, `S0` and `S1`. Floats are written
//! in shortest round-trip form, so reading an artifact back reproduces every
//! value bit for bit. The layout is described in `docs/artifact.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bellman::{Coefficients, CostTables, Label, Regions};
use crate::coeffopt::{Constraints, DesignDiagnostics, DesignOptions, DesignedTest};
use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, PosteriorTables};
use crate::model::ModelSpec;
use crate::table::Table;

pub const FORMAT_VERSION: &str = "seqjde-test/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatTable {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatLabels {
    shape: [usize; 2],
    data: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactTables {
    rho: FlatTable,
    continuation: FlatTable,
    stop_h0: FlatTable,
    stop_h1: FlatTable,
    stopping_cost: FlatTable,
    posterior_h0: FlatTable,
    posterior_h1: FlatTable,
    mean_h0: FlatTable,
    mean_h1: FlatTable,
    variance_h0: FlatTable,
    variance_h1: FlatTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Artifact {
    version: String,
    model: ModelSpec,
    grid: GridSpec,
    constraints: Constraints,
    options: DesignOptions,
    coefficients: Coefficients,
    dual_objective: f64,
    start_errors: [f64; 4],
    diagnostics: DesignDiagnostics,
    t_axis: Axis,
    t0_index: usize,
    priors: [f64; 2],
    prior_variance: [f64; 2],
    tables: ArtifactTables,
    regions: FlatLabels,
}

fn flatten(t: &Table) -> FlatTable {
    FlatTable {
        shape: [t.rows(), t.cols()],
        data: t.as_slice().to_vec(),
    }
}

fn unflatten(name: &str, flat: FlatTable, rows: usize, cols: usize) -> Result<Table> {
    let expected = rows * cols;
    let found = if flat.shape != [rows, cols] {
        flat.shape[0] * flat.shape[1]
    } else {
        flat.data.len()
    };
    if found != expected || flat.shape != [rows, cols] {
        return Err(Error::ShapeMismatch {
            table: name.into(),
            expected,
            found,
        });
    }
    Ok(Table::from_vec(rows, cols, flat.data).expect("length checked"))
}

fn to_artifact(test: &DesignedTest) -> Artifact {
    let p = &test.posterior;
    let c = &test.costs;
    Artifact {
        version: FORMAT_VERSION.into(),
        model: test.model,
        grid: test.grid,
        constraints: test.constraints,
        options: test.options,
        coefficients: test.coefficients,
        dual_objective: test.dual_objective,
        start_errors: test.start_errors,
        diagnostics: test.diagnostics.clone(),
        t_axis: p.t_axis,
        t0_index: p.t0_index,
        priors: p.priors,
        prior_variance: p.prior_var,
        tables: ArtifactTables {
            rho: flatten(&c.rho),
            continuation: flatten(&c.cont),
            stop_h0: flatten(&c.stop0),
            stop_h1: flatten(&c.stop1),
            stopping_cost: flatten(&c.g),
            posterior_h0: flatten(&p.prob[0]),
            posterior_h1: flatten(&p.prob[1]),
            mean_h0: flatten(&p.mean[0]),
            mean_h1: flatten(&p.mean[1]),
            variance_h0: flatten(&p.var[0]),
            variance_h1: flatten(&p.var[1]),
        },
        regions: FlatLabels {
            shape: [test.regions.horizon() + 1, test.regions.t_count()],
            data: test.regions.labels().iter().map(|l| l.code().to_string()).collect(),
        },
    }
}

fn from_artifact(a: Artifact) -> Result<DesignedTest> {
    let rows = a.grid.horizon + 1;
    let cols = a.grid.t.count;
    let t = a.tables;
    let full = |name: &str, flat: FlatTable| unflatten(name, flat, rows, cols);
    let costs = CostTables {
        rho: full("rho", t.rho)?,
        cont: unflatten("continuation", t.continuation, rows - 1, cols)?,
        stop0: full("stop_h0", t.stop_h0)?,
        stop1: full("stop_h1", t.stop_h1)?,
        g: full("stopping_cost", t.stopping_cost)?,
    };
    let posterior = PosteriorTables {
        t_axis: a.t_axis,
        t0_index: a.t0_index,
        priors: a.priors,
        prior_var: a.prior_variance,
        prob: [full("posterior_h0", t.posterior_h0)?, full("posterior_h1", t.posterior_h1)?],
        mean: [full("mean_h0", t.mean_h0)?, full("mean_h1", t.mean_h1)?],
        var: [full("variance_h0", t.variance_h0)?, full("variance_h1", t.variance_h1)?],
    };
    if a.regions.shape != [rows, cols] || a.regions.data.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            table: "regions".into(),
            expected: rows * cols,
            found: a.regions.data.len(),
        });
    }
    let labels = a
        .regions
        .data
        .iter()
        .map(|s| Label::from_code(s).ok_or_else(|| Error::InvalidGrid(format!("unknown region label `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let regions = Regions::from_labels(rows, cols, labels).expect("length checked");
    let test = DesignedTest {
        model: a.model,
        grid: a.grid,
        constraints: a.constraints,
        options: a.options,
        coefficients: a.coefficients,
        dual_objective: a.dual_objective,
        costs,
        regions,
        posterior,
        start_errors: a.start_errors,
        diagnostics: a.diagnostics,
    };
    crate::grid::DiscretizedModel::from_tables(test.posterior.clone())?;
    Ok(test)
}

pub fn to_json(test: &DesignedTest) -> Result<String> {
    Ok(serde_json::to_string(&to_artifact(test))?)
}

pub fn from_json(s: &str) -> Result<DesignedTest> {
    from_value(serde_json::from_str(s)?)
}

fn from_value(value: serde_json::Value) -> Result<DesignedTest> {
    let found = value
        .get("version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>")
        .to_string();
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION.into(),
            found,
        });
    }
    from_artifact(serde_json::from_value(value)?)
}

pub fn save(test: &DesignedTest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &to_artifact(test))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DesignedTest> {
    let r = BufReader::new(File::open(path)?);
    from_value(serde_json::from_reader(r)?)
}

/// Writes `n,t_index,t_value,label` rows for every grid node.
pub fn write_regions_csv<W: Write>(regions: &Regions, t_axis: &Axis, mut w: W) -> Result<()> {
    writeln!(w, "n,t_index,t_value,label")?;
    for n in 0..=regions.horizon() {
        for (i, label) in regions.row(n).iter().enumerate() {
            writeln!(w, "{n},{i},{},{}", t_axis.point(i), label.code())?;
        }
    }
    Ok(())
}

pub fn save_regions_csv(test: &DesignedTest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_regions_csv(&test.regions, &test.posterior.t_axis, &mut w)?;
    w.flush()?;
    Ok(())
}
