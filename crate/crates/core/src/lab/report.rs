//! Merges study outputs into one JSON report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabError, Summary, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableIndex {
    pub path: String,
    pub columns: Vec<String>,
    pub rows: usize,
    pub config_hash: Option<String>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub passed: bool,
    pub failed_assertions: Vec<String>,
    pub studies: Vec<Summary>,
    pub tables: Vec<TableIndex>,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn index_csv(path: &str, text: &str) -> TableIndex {
    let mut config_hash = None;
    let mut columns = Vec::new();
    let mut rows = 0;
    for line in text.lines() {
        if let Some(c) = line.strip_prefix('#') {
            if let Some(h) = c.trim().strip_prefix("config_hash=") {
                config_hash = Some(h.to_string());
            }
        } else if columns.is_empty() {
            columns = line.split(',').map(str::to_string).collect();
        } else if !line.is_empty() {
            rows += 1;
        }
    }
    TableIndex {
        path: path.to_string(),
        columns,
        rows,
        config_hash,
        sha256: hex(text.as_bytes()),
    }
}

/// Builds the report from `(relative path, contents)` pairs: every
/// `summary.json` becomes a study entry and every `.csv` an indexed table.
/// The result depends only on the inputs (ordered by path).
pub fn build_report(files: &[(String, String)]) -> Result<Report, LabError> {
    let mut files: Vec<&(String, String)> = files.iter().collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut studies = Vec::new();
    let mut tables = Vec::new();
    for (path, text) in files {
        if path.ends_with("summary.json") {
            studies.push(serde_json::from_str::<Summary>(text)?);
        } else if path.ends_with(".csv") {
            tables.push(index_csv(path, text));
        }
    }
    let failed_assertions = studies
        .iter()
        .flat_map(|s| s.assertions.iter().filter(|a| !a.passed).map(move |a| format!("{}/{}", s.study, a.name)))
        .collect::<Vec<_>>();
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        passed: failed_assertions.is_empty(),
        failed_assertions,
        studies,
        tables,
    })
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<(), LabError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == "summary.json" || name.ends_with(".csv") {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, std::fs::read_to_string(&p)?));
        }
    }
    Ok(())
}

/// Reads every summary and CSV below `root`.
pub fn read_outputs(root: &Path) -> Result<Vec<(String, String)>, LabError> {
    let mut out = Vec::new();
    collect(root, root, &mut out)?;
    Ok(out)
}
