//! Tables regenerated from the run logs of an experiment directory.
//!
//! Layout: `<dir>/<label>/repeat-<r>/runlog.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fastadv::training::{RunLog, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub runs: usize,
    pub clean_mean: f64,
    pub clean_var: f64,
    /// Pooled over every evaluation repeat of every run.
    pub robust_mean: f64,
    pub robust_var: f64,
    pub collapse_events: usize,
    pub diverged: usize,
    /// Resolved config and seed of each run, in repeat order.
    pub configs: Vec<TrainConfig>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
}

fn repeat_index(name: &str) -> Option<usize> {
    name.strip_prefix("repeat-")?.parse().ok()
}

pub fn collect_logs(dir: &Path) -> Result<BTreeMap<String, Vec<RunLog>>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Err(HarnessError::Runtime(format!("{} is not a directory", dir.display())));
    }
    for label in std::fs::read_dir(dir)? {
        let label = label?;
        if !label.file_type()?.is_dir() {
            continue;
        }
        let mut runs: Vec<(usize, RunLog)> = Vec::new();
        for rep in std::fs::read_dir(label.path())? {
            let rep = rep?;
            let Some(r) = repeat_index(&rep.file_name().to_string_lossy()) else {
                continue;
            };
            let path = rep.path().join("runlog.json");
            if path.is_file() {
                runs.push((r, RunLog::from_json(&std::fs::read_to_string(&path)?)?));
            }
        }
        if !runs.is_empty() {
            runs.sort_by_key(|(r, _)| *r);
            out.insert(
                label.file_name().to_string_lossy().into_owned(),
                runs.into_iter().map(|(_, l)| l).collect(),
            );
        }
    }
    Ok(out)
}

pub fn summarize_logs(logs: &BTreeMap<String, Vec<RunLog>>) -> Vec<SummaryRow> {
    logs.iter()
        .map(|(label, runs)| {
            let finished: Vec<_> = runs.iter().filter_map(|r| r.final_eval.as_ref()).collect();
            let clean: Vec<f64> = finished.iter().map(|e| e.clean_acc).collect();
            let robust: Vec<f64> = finished.iter().flat_map(|e| e.robust_runs.iter().copied()).collect();
            let (clean_mean, clean_var) = mean_var(&clean);
            let (robust_mean, robust_var) = mean_var(&robust);
            SummaryRow {
                label: label.clone(),
                runs: runs.len(),
                clean_mean,
                clean_var,
                robust_mean,
                robust_var,
                collapse_events: runs.iter().map(|r| r.events.len()).sum(),
                diverged: runs.iter().filter(|r| r.divergence.is_some()).count(),
                configs: runs.iter().map(|r| r.config.clone()).collect(),
            }
        })
        .collect()
}

fn pct(m: f64, v: f64) -> String {
    // Variance of a percentage scales by 100^2.
    format!("{:.2} ± {:.2}", 100.0 * m, 1e4 * v)
}

/// Write `summary.csv`, `summary.md` and `summary.json` into `dir`.
/// Reads only the run logs, so repeated calls produce identical files.
pub fn write_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize_logs(&collect_logs(dir)?);
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "label",
        "runs",
        "clean_mean",
        "clean_var",
        "robust_mean",
        "robust_var",
        "collapse_events",
        "diverged",
    ])?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.runs.to_string(),
            r.clean_mean.to_string(),
            r.clean_var.to_string(),
            r.robust_mean.to_string(),
            r.robust_var.to_string(),
            r.collapse_events.to_string(),
            r.diverged.to_string(),
        ])?;
    }
    w.flush()?;

    let mut md = String::from("| method | runs | clean (%) | robust (%) | collapses | diverged |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.label,
            r.runs,
            pct(r.clean_mean, r.clean_var),
            pct(r.robust_mean, r.robust_var),
            r.collapse_events,
            r.diverged
        );
    }
    std::fs::write(dir.join("summary.md"), md)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
