//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::report::{build_report, read_outputs};
use super::studies::{run_convergence_study, run_entropy, run_hjb, run_sample, run_simulate, run_value};
use super::{ExperimentConfig, LabError, StudyOutput};

#[derive(Debug, Parser)]
#[command(name = "relaxlab", version, about = "Local entropy, two-scale SDE and effective HJB studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; each study writes into its own subdirectory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Tabulate φ_γ and ∇φ_γ over an x-grid, with moment growth.
    Entropy,
    /// Langevin gradient estimates against quadrature.
    Sample,
    /// Write one bundle of perturbed trajectories.
    Simulate,
    /// Trajectory convergence as ε decreases.
    Converge,
    /// Value ordering and quasi-optimality.
    Value,
    /// Averaged HJB on a 1-D grid.
    Hjb,
    /// Merge the outputs below --out into report.json.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Entropy => "entropy",
            Command::Sample => "sample",
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Value => "value",
            Command::Hjb => "hjb",
            Command::Report => "report",
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, LabError> {
    let path = cli.config.as_ref().ok_or_else(|| LabError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn study(cmd: Command, cfg: &ExperimentConfig) -> Result<StudyOutput, LabError> {
    match cmd {
        Command::Entropy => Ok(run_entropy(cfg)?.output(cfg)),
        Command::Sample => Ok(run_sample(cfg)?.output(cfg)),
        Command::Simulate => run_simulate(cfg),
        Command::Converge => Ok(run_convergence_study(cfg)?.output(cfg)),
        Command::Value => run_value(cfg),
        Command::Hjb => run_hjb(cfg)?.output(cfg),
        Command::Report => unreachable!("report reads outputs instead of a config"),
    }
}

fn report(out: &Path, quiet: bool) -> Result<bool, LabError> {
    let files = read_outputs(out)?;
    let r = build_report(&files)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&r)? + "\n")?;
    if !quiet {
        eprintln!("report: {} studies, {} tables, passed = {}", r.studies.len(), r.tables.len(), r.passed);
        for f in &r.failed_assertions {
            eprintln!("  failed: {f}");
        }
    }
    Ok(r.passed)
}

fn execute(cli: &Cli) -> Result<bool, LabError> {
    if cli.command == Command::Report {
        return report(&cli.out, cli.quiet);
    }
    let cfg = load(cli)?;
    let output = study(cli.command, &cfg)?;
    let dir = cli.out.join(cli.command.name());
    output.write(&dir)?;
    if !cli.quiet {
        for a in &output.summary.assertions {
            eprintln!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
        }
        eprintln!("wrote {}", dir.display());
    }
    Ok(output.summary.passed)
}

/// Runs the CLI and returns the process exit code: `0` on success, `1` when
/// an assertion (or a numerical run) fails, `2` on configuration errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(LabError::Config(format!("thread pool: {e}"))),
        },
        None => execute(&cli),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
