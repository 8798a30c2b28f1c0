//! Long-format experiment reports and their CSV / JSON / markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use crate::error::{Error, Result};

/// One measured value, traceable to its config and trial seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    AtMost,
    AtLeast,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::AtMost => "<=",
            Comparator::AtLeast => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub claim: String,
    pub value: f64,
    pub comparator: Comparator,
    pub threshold: f64,
    pub passed: bool,
}

/// Per-(width, seed) line of the kernel diagnostics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDiagnostic {
    pub m: usize,
    pub seed: u64,
    pub ratio_error: f64,
    pub residual_rel: f64,
    pub c1: f64,
    pub c1_hat: f64,
    pub c2: f64,
    pub c2_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
    pub checks: Vec<Check>,
    /// Statistics computed across seeds (fitted exponents and the like).
    pub derived: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kernel_diagnostics: Vec<KernelDiagnostic>,
}

impl ExperimentReport {
    pub fn new(experiment: ExperimentKind, config_hash: impl Into<String>, seeds: Vec<u64>) -> Self {
        ExperimentReport {
            experiment,
            config_hash: config_hash.into(),
            seeds,
            rows: Vec::new(),
            aggregates: Vec::new(),
            checks: Vec::new(),
            derived: BTreeMap::new(),
            kernel_diagnostics: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, variant: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push(Row {
            experiment: self.experiment.as_str().to_string(),
            config_hash: self.config_hash.clone(),
            seed,
            variant: variant.into(),
            metric: metric.into(),
            value,
        });
    }

    /// Values of one `(variant, metric)` in row order.
    pub fn values(&self, variant: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn value_by_seed(&self, variant: &str, metric: &str) -> BTreeMap<u64, f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.metric == metric)
            .map(|r| (r.seed, r.value))
            .collect()
    }

    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        let v = self.values(variant, metric);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }

    pub fn aggregate(&self, variant: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant && a.metric == metric)
    }

    /// Recomputes `aggregates` from `rows`.
    pub fn compute_aggregates(&mut self) {
        self.aggregates = aggregate_rows(&self.rows);
    }

    pub fn check(&mut self, name: impl Into<String>, claim: impl Into<String>, value: f64, comparator: Comparator, threshold: f64) {
        let passed = match comparator {
            Comparator::AtMost => value <= threshold,
            Comparator::AtLeast => value >= threshold,
        };
        self.checks.push(Check { name: name.into(), claim: claim.into(), value, comparator, threshold, passed });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn kernel_csv(&self) -> Result<String> {
        to_csv(&self.kernel_diagnostics)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} (config {})\n", self.experiment, self.config_hash);
        let _ = writeln!(s, "Seeds: {} trials.\n", self.seeds.len());
        if !self.checks.is_empty() {
            s.push_str("| check | claim | value | threshold | result |\n|---|---|---|---|---|\n");
            for c in &self.checks {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.6} | {} {} | {} |",
                    c.name,
                    c.claim,
                    c.value,
                    c.comparator.symbol(),
                    c.threshold,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            s.push('\n');
        }
        if !self.derived.is_empty() {
            s.push_str("| statistic | value |\n|---|---|\n");
            for (k, v) in &self.derived {
                let _ = writeln!(s, "| {k} | {v:.6} |");
            }
            s.push('\n');
        }
        s.push_str("| variant | metric | mean | min | max | n |\n|---|---|---|---|---|---|\n");
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "| {} | {} | {:.6} | {:.6} | {:.6} | {} |",
                a.variant, a.metric, a.mean, a.min, a.max, a.count
            );
        }
        s
    }

    /// Writes `<stem>.csv`, `<stem>.json`, `<stem>.md` (and `<stem>.kernel.csv`
    /// when there are kernel diagnostics) into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = vec![
            (dir.join(format!("{stem}.csv")), self.csv()?),
            (dir.join(format!("{stem}.json")), self.to_json()),
            (dir.join(format!("{stem}.md")), self.markdown()),
        ];
        if !self.kernel_diagnostics.is_empty() {
            files.push((dir.join(format!("{stem}.kernel.csv")), self.kernel_csv()?));
        }
        for (path, body) in &files {
            fs::write(path, body)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

pub fn aggregate_rows(rows: &[Row]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.variant, &r.metric)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((variant, metric), v)| Aggregate {
            variant: variant.to_string(),
            metric: metric.to_string(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: v.len(),
        })
        .collect()
}

fn to_csv<T: Serialize>(items: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for it in items {
        w.serialize(it).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Parses a rows CSV written by [`ExperimentReport::write`].
pub fn read_rows_csv(text: &str) -> Result<Vec<Row>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<Row>, _>>()
        .map_err(|e| Error::Parse(format!("csv: {e}")))
}
