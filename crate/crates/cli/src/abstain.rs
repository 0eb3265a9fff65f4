//! Reading zero-shot self-assessment results.
//!
//! An abstain table is JSON lines of
//! `{"example_id": .., "self_claims_known": 0|1|null, "actual_label": 0|1}`.
//! A null (or absent) claim means the response could not be parsed; such rows
//! are excluded from the accuracy and counted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbstainSummary {
    /// Fraction of parsed rows whose claim equals the actual label; `None`
    /// when every row was excluded.
    pub accuracy: Option<f64>,
    pub rows: usize,
    pub excluded: usize,
}

fn bit(value: Option<&Value>, field: &str, line: usize, path: &Path) -> CliResult<Option<bool>> {
    let bad = || {
        CliError::data(
            "MalformedAbstainTable",
            format!("{}:{line}: {field} must be 0, 1, true, false or null", path.display()),
        )
    };
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Bool(b)) => Ok(Some(*b)),
        Some(Value::Number(n)) => match n.as_u64() {
            Some(0) => Ok(Some(false)),
            Some(1) => Ok(Some(true)),
            _ => Err(bad()),
        },
        Some(_) => Err(bad()),
    }
}

pub fn summarize_table(text: &str, path: &Path) -> CliResult<AbstainSummary> {
    let (mut rows, mut excluded, mut agree) = (0usize, 0usize, 0usize);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Value = serde_json::from_str(line).map_err(|e| {
            CliError::data("MalformedAbstainTable", format!("{}:{line_no}: {e}", path.display()))
        })?;
        if !record.is_object() {
            return Err(CliError::data(
                "MalformedAbstainTable",
                format!("{}:{line_no}: expected a JSON object", path.display()),
            ));
        }
        let actual = bit(record.get("actual_label"), "actual_label", line_no, path)?.ok_or_else(|| {
            CliError::data(
                "MalformedAbstainTable",
                format!("{}:{line_no}: actual_label is required", path.display()),
            )
        })?;
        rows += 1;
        match bit(record.get("self_claims_known"), "self_claims_known", line_no, path)? {
            None => excluded += 1,
            Some(claim) => agree += usize::from(claim == actual),
        }
    }
    let parsed = rows - excluded;
    Ok(AbstainSummary {
        accuracy: (parsed > 0).then(|| agree as f64 / parsed as f64),
        rows,
        excluded,
    })
}

pub fn read_table(path: &Path) -> CliResult<AbstainSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| certprobe_core::Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })?;
    summarize_table(&text, path)
}

/// Parses `DATASET=PATH` pairs.
pub fn parse_table_arg(arg: &str) -> Result<(String, std::path::PathBuf), String> {
    match arg.split_once('=') {
        Some((d, p)) if !d.is_empty() && !p.is_empty() => Ok((d.to_owned(), p.into())),
        _ => Err(format!("expected DATASET=PATH, got {arg:?}")),
    }
}

/// Reads a dataset→accuracy map from either a JSON object or a best-layer
/// table (array of rows with `dataset` / `dataset_id` and `accuracy`).
pub fn read_accuracy_map(path: &Path, skip: &[&str]) -> CliResult<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| certprobe_core::Error::IoFailure {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::data("MalformedAccuracyMap", format!("{}: {e}", path.display())))?;
    let bad = |msg: &str| CliError::data("MalformedAccuracyMap", format!("{}: {msg}", path.display()));
    let mut out = BTreeMap::new();
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let acc = v.as_f64().ok_or_else(|| bad(&format!("value for {k:?} is not a number")))?;
                out.insert(k, acc);
            }
        }
        Value::Array(rows) => {
            for row in rows {
                let id = row
                    .get("dataset_id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("row without dataset_id"))?;
                let acc = row
                    .get("accuracy")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| bad("row without numeric accuracy"))?;
                if out.insert(id.to_owned(), acc).is_some() {
                    return Err(bad(&format!("dataset {id:?} appears twice")));
                }
            }
        }
        _ => return Err(bad("expected an object or an array of rows")),
    }
    out.retain(|k, _| !skip.contains(&k.as_str()));
    for (k, v) in &out {
        if !v.is_finite() {
            return Err(bad(&format!("accuracy for {k:?} is not finite")));
        }
    }
    Ok(out)
}
