//! `seqjde` command-line front end.
//!
//! Exit status: 0 on success, 1 when a check or computation fails, 2 on a
//! usage, configuration or input error.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use seqjde::coeffopt::{design_on, DesignedTest};
use seqjde::grid::build;
use seqjde::simulate::{monte_carlo, sprt_design, sprt_monte_carlo, SimulationReport};
use seqjde::{par, persist, verify, Error};

use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "seqjde", version, about = "Optimal truncated sequential joint detection and estimation")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true, env = "SEQJDE_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the grid, choose the cost coefficients and save the test.
    Design {
        #[arg(long)]
        config: PathBuf,
        /// Artifact path; defaults to `outputs.artifact` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo evaluation of a designed test.
    Simulate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo evaluation of the truncated SPRT with the same constraints.
    BaselineSprt {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `runs` of the config.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        runs: Option<u64>,
        /// Defaults to `seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; defaults to `outputs.report` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the decision regions as CSV.
    Regions {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite against a stored test.
    Verify {
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Input(String),
    Check(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Input(_) => 2,
            Failure::Check(_) | Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Check(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ParameterDomain { .. }
            | Error::SupportOverlap { .. }
            | Error::InvalidGrid(_)
            | Error::GridCoverage { .. }
            | Error::RegularizationDomain { .. }
            | Error::InvalidConstraints(_)
            | Error::EmptySimulation => Failure::Input(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        par::init_threads(n as usize);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Design { config, out } => run_design(&config, out),
        Command::Simulate { test, runs, seed, out } => {
            let test = load_test(&test)?;
            let started = Instant::now();
            let report = monte_carlo(&test, runs as usize, seed)?;
            eprintln!("simulated {runs} runs in {:.1} s", started.elapsed().as_secs_f64());
            print_report(&report);
            write_json(&out, &report)
        }
        Command::BaselineSprt { config, runs, seed, out } => run_baseline(&config, runs, seed, out),
        Command::Regions { test, out } => {
            let test = load_test(&test)?;
            persist::save_regions_csv(&test, &out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            println!("rows {}", test.regions.labels().len());
            Ok(())
        }
        Command::Verify { test } => run_verify(&test),
    }
}

fn load_test(path: &Path) -> Result<DesignedTest, Failure> {
    persist::load(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let fail = |e: &dyn std::fmt::Display| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(|e| fail(&e))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| fail(&e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| fail(&e))
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("no {what} path: pass --out or set it in the config outputs")))
}

fn run_design(config_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let config = RunConfig::load(config_path)?;
    let out = required(out, &config.outputs.artifact, "artifact")?;
    let started = Instant::now();
    let problem = config.model.build()?;
    let disc = build(&problem, &config.grid)?;
    eprintln!("grid built in {:.1} s", started.elapsed().as_secs_f64());
    let started = Instant::now();
    let k = config.constraints()?;
    let test = design_on(&config.model, &config.grid, &disc, &k, &config.design_options())?;
    eprintln!(
        "{} finished in {:.1} s after {} iterations",
        test.diagnostics.solver.method,
        started.elapsed().as_secs_f64(),
        test.diagnostics.solver.iterations
    );
    persist::save(&test, &out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    if let Some(regions) = &config.outputs.regions {
        persist::save_regions_csv(&test, regions).map_err(|e| Failure::Runtime(format!("{}: {e}", regions.display())))?;
    }
    let [c0, c1, c2, c3] = test.coefficients.as_array();
    println!("coefficients {c0} {c1} {c2} {c3}");
    let [a0, a1, b0, b1] = test.start_errors;
    println!("start_errors {a0} {a1} {b0} {b1}");
    println!("dual_objective {}", test.dual_objective);
    Ok(())
}

fn run_baseline(config_path: &Path, runs: Option<u64>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let config = RunConfig::load(config_path)?;
    let out = required(out, &config.outputs.report, "report")?;
    let runs = runs
        .map(|r| r as usize)
        .or(config.runs)
        .ok_or_else(|| Failure::Usage("no run count: pass --runs or set `runs` in the config".into()))?;
    let seed = seed
        .or(config.seed)
        .ok_or_else(|| Failure::Usage("no seed: pass --seed or set `seed` in the config".into()))?;
    let problem = config.model.build()?;
    let disc = build(&problem, &config.grid)?;
    let policy = sprt_design(&disc.model, &config.constraints()?)?;
    println!("thresholds {} {}", policy.lower, policy.upper);
    let report = sprt_monte_carlo(&policy, &problem, runs, seed)?;
    print_report(&report);
    write_json(&out, &report)
}

fn run_verify(path: &Path) -> Result<(), Failure> {
    let test = load_test(path)?;
    let report = verify::verify(&test)?;
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<32} {:>12.3e} <= {:<9.1e} {}", c.name, c.measured, c.tolerance, c.detail);
    }
    for (name, value) in &report.diagnostics {
        println!("INFO {name:<32} {value:>12.3e}");
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Check(format!("{failed} of {} checks failed", report.checks.len())))
    }
}

fn print_report(r: &SimulationReport) {
    println!("runs {} seed {}", r.runs, r.seed);
    println!("alpha0 {:.6} +- {:.6}", r.alpha0, r.alpha0_se);
    println!("alpha1 {:.6} +- {:.6}", r.alpha1, r.alpha1_se);
    println!("mse0 {:.6} +- {:.6}", r.mse0, r.mse0_se);
    println!("mse1 {:.6} +- {:.6}", r.mse1, r.mse1_se);
    println!("mean_tau {:.4} +- {:.4}", r.mean_tau, r.mean_tau_se);
    println!("truncation_rate {:.6}", r.truncation_rate);
}
