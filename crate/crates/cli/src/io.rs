//! File helpers: JSON for configs and reports, JSON Lines for datasets.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use bandex_core::dataset::ContextEncoding;
use bandex_core::policy::Policy;
use bandex_core::{LoggedDataset, SoftmaxPolicy, SyntheticProblem, TabularPolicy};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Reads a problem written by `gen`. A missing file is reported as a failure
/// of the `gen` stage naming the expected path.
pub fn read_problem(path: &Path) -> Result<SyntheticProblem> {
    if !path.exists() {
        return Err(CliError::stage(
            "gen",
            None,
            format!("problem file {} not found; run `bandex gen` first", path.display()),
        ));
    }
    let problem: SyntheticProblem = read_json(path)?;
    problem.validate()?;
    Ok(problem)
}

pub fn read_dataset(path: &Path, contexts: Option<Vec<Vec<f64>>>) -> Result<LoggedDataset> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(LoggedDataset::read_jsonl(BufReader::new(file), contexts)?)
}

pub fn write_dataset(path: &Path, data: &LoggedDataset) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    data.write_jsonl(&mut out, ContextEncoding::Index)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path, e))
}

/// On-disk policy: `{"kind": "softmax", ...}` or `{"kind": "tabular", "table": ...}`.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyFile {
    Softmax(SoftmaxPolicy),
    Tabular(TabularPolicy),
}

impl PolicyFile {
    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            PolicyFile::Softmax(p) => p,
            PolicyFile::Tabular(p) => p,
        }
    }
}

pub fn read_policy(path: &Path) -> Result<PolicyFile> {
    let file: PolicyFile = read_json(path)?;
    match &file {
        PolicyFile::Softmax(p) => p.validate()?,
        PolicyFile::Tabular(p) => {
            TabularPolicy::new(p.table.clone())?;
        }
    }
    Ok(file)
}
