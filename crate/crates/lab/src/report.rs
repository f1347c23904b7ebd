//! Check results, artifact bookkeeping and `report.json`.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Measured quantity; `null` in JSON when not finite.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    /// Passes when `value <= tolerance` (NaN fails).
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
            detail: String::new(),
        }
    }

    /// A yes/no property; `value` is 1 when it holds.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            passed: ok,
            detail: String::new(),
        }
    }

    pub fn failed(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: f64::NAN,
            tolerance: f64::NAN,
            passed: false,
            detail: detail.into(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {}: value={:e} tolerance={:e}",
            self.name, self.value, self.tolerance
        );
        if !self.detail.is_empty() {
            s.push_str(" (");
            s.push_str(&self.detail);
            s.push(')');
        }
        s
    }
}

/// Where artifacts go; with no directory nothing is written.
#[derive(Debug, Default)]
pub struct Artifacts {
    dir: Option<PathBuf>,
    files: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            files: Vec::new(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Writes `name` through `f` and records it in the manifest.
    pub fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut dyn Write) -> symbridge::Result<()>,
    ) -> anyhow::Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(name);
        let mut out = BufWriter::new(std::fs::File::create(&path)?);
        f(&mut out)?;
        out.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Records a file written by other means.
    pub fn record(&mut self, name: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        self.files.push(name.to_string());
        Some(dir.join(name))
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn into_files(mut self) -> Vec<String> {
        self.files.sort();
        self.files.dedup();
        self.files
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    /// Sorted by name, each name once.
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub passed: bool,
}

impl RunReport {
    pub fn new(
        config: ExperimentConfig,
        mut checks: Vec<Check>,
        artifacts: Vec<String>,
        timings: BTreeMap<String, f64>,
    ) -> Self {
        checks.sort_by(|a, b| a.name.cmp(&b.name));
        let passed = checks.iter().all(|c| c.passed);
        Self {
            config,
            checks,
            artifacts,
            timings,
            passed,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_never_passes() {
        assert!(!Check::at_most("x", f64::NAN, 1.0).passed);
        assert!(Check::at_most("x", 1.0, 1.0).passed);
    }

    #[test]
    fn report_sorts_checks() {
        let cfg = crate::config::parse_config(r#"{"experiment": "full-suite", "seed": 1}"#).unwrap();
        let r = RunReport::new(
            cfg,
            vec![Check::holds("b", true), Check::holds("a", false)],
            vec![],
            BTreeMap::new(),
        );
        assert_eq!(r.checks[0].name, "a");
        assert!(!r.passed);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["checks"][0]["value"].is_number());
    }
}
