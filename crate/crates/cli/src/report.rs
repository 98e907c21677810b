//! `report.json`: one [`RunReport`] per command, merged across invocations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// Effective configuration after flags were applied to the config file.
    pub config: Value,
    pub seed: u64,
    pub metrics: Value,
    pub wall_seconds: f64,
    /// Artifact role to path.
    pub artifacts: BTreeMap<String, PathBuf>,
}

/// serde_json turns NaN and infinities into `null`, so a null anywhere means
/// something non-finite slipped through.
fn first_null(value: &Value, path: &str) -> Option<String> {
    match value {
        Value::Null => Some(path.to_owned()),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .find_map(|(i, v)| first_null(v, &format!("{path}[{i}]"))),
        Value::Object(map) => map.iter().find_map(|(k, v)| first_null(v, &format!("{path}.{k}"))),
        _ => None,
    }
}

impl RunReport {
    pub fn check_finite(&self) -> Result<(), Failure> {
        if !self.wall_seconds.is_finite() {
            return Err(Failure::Numerical("wall_seconds is not finite".into()));
        }
        for (name, v) in [("config", &self.config), ("metrics", &self.metrics)] {
            if let Some(at) = first_null(v, name) {
                return Err(Failure::Numerical(format!("{at} is not a finite number")));
            }
        }
        Ok(())
    }
}

pub fn load_all(out: &Path) -> anyhow::Result<BTreeMap<String, RunReport>> {
    let path = out.join(REPORT_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{} is not a report file: {e}", path.display())).into())
}

/// Replaces the entry for `report.command` and rewrites the file.
pub fn record(out: &Path, report: RunReport) -> anyhow::Result<()> {
    report.check_finite()?;
    let mut all = load_all(out)?;
    all.insert(report.command.clone(), report);
    let path = out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&all)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
