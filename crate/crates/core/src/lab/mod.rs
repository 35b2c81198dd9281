//! Experiment orchestration: configuration, the studies, persisted outputs
//! and the command line.

pub mod cli;
pub mod config;
pub mod report;
pub mod studies;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlError;
use crate::gibbs::GibbsError;
use crate::hjb::HjbError;
use crate::problems::ProblemError;
use crate::sde::SdeError;

pub use config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("estimated {estimate:.3e} drift evaluations exceed the op budget {budget:.3e}")]
    Budget { estimate: f64, budget: f64 },
    #[error(transparent)]
    Gibbs(#[from] GibbsError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Hjb(#[from] HjbError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// `2` for anything the configuration could have prevented.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Problem(_) | LabError::Budget { .. } => 2,
            _ => 1,
        }
    }
}

pub fn check_budget(estimate: f64, budget: f64) -> Result<(), LabError> {
    if estimate > budget {
        return Err(LabError::Budget { estimate, budget });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Observed quantity (absent when not finite).
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Assertion {
    /// Passes when `value ≤ threshold`.
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= threshold,
            value: finite(value),
            threshold: finite(threshold),
            detail: detail.into(),
        }
    }

    pub fn check(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            value: None,
            threshold: None,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub study: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub problem: String,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub metrics: BTreeMap<String, f64>,
}

impl Summary {
    pub fn new(study: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            study: study.to_string(),
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            problem: cfg.problem.name.clone(),
            passed: true,
            assertions: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn assert(&mut self, a: Assertion) {
        self.passed &= a.passed;
        self.assertions.push(a);
    }

    pub fn metric(&mut self, name: &str, v: f64) {
        if v.is_finite() {
            self.metrics.insert(name.to_string(), v);
        }
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

/// A CSV file held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Comment lines `# schema_version`, `# config_hash`, `# seed`, then
    /// the header and rows.
    pub fn render(&self, config_hash: &str, seed: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# schema_version={SCHEMA_VERSION}");
        let _ = writeln!(s, "# config_hash={config_hash}");
        let _ = writeln!(s, "# seed={seed}");
        let _ = writeln!(s, "{}", self.header.join(","));
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        s
    }
}

/// Formats a number for CSV output; empty for `None`.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn join_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Everything a study produces. Timings are kept apart from the tables so
/// that the tables are reproducible byte for byte.
#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub summary: Summary,
    pub tables: Vec<CsvTable>,
    pub timings: BTreeMap<String, f64>,
}

impl StudyOutput {
    /// Writes `<dir>/<table>.csv`, `summary.json` and `timings.json`.
    pub fn write(&self, dir: &Path) -> Result<(), LabError> {
        std::fs::create_dir_all(dir)?;
        for t in &self.tables {
            std::fs::write(dir.join(format!("{}.csv", t.name)), t.render(&self.summary.config_hash, self.summary.seed))?;
        }
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)? + "\n")?;
        Ok(())
    }
}
