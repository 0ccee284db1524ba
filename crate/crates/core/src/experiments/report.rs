//! Writing reports as JSON and CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ExperimentError, ExperimentOutput, ExperimentReport, Result};
use crate::autodiff::write_checkpoint;
use crate::eval::{RunMetrics, METRIC_COLUMNS};
use crate::model::{Architecture, LossWeights};

/// Wall-clock timings; the only output that differs between reruns.
pub const TIMING_FILE: &str = "timing.json";

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// One row per report row: mean and population std of each metric.
pub fn table_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("row,model,window,offset,features,n_test,runs");
    for c in METRIC_COLUMNS {
        let _ = write!(out, ",{c}_mean,{c}_std");
    }
    out.push('\n');
    for r in &report.rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.label),
            r.model.name(),
            r.window,
            r.offset,
            r.features.label(),
            r.n_test,
            r.aggregate.runs
        );
        for m in r.aggregate.as_row() {
            let _ = write!(out, ",{},{}", m.mean, m.std);
        }
        out.push('\n');
    }
    out
}

/// Long format: one line per (row, test month) with the seed-mean and the
/// per-seed probabilities.
pub fn probabilities_csv(report: &ExperimentReport) -> String {
    let seeds = &report.config.seeds;
    let mut out = String::from("row,month,label,mean");
    for s in seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push('\n');
    for r in &report.rows {
        let mean = r.mean_probabilities();
        for (i, month) in r.test_months.iter().enumerate() {
            let _ = write!(out, "{},{},{},{}", csv_field(&r.label), month, r.test_labels[i], mean[i]);
            for run in &r.runs {
                let _ = write!(out, ",{}", run.probabilities[i]);
            }
            out.push('\n');
        }
    }
    out
}

fn curve_csv(report: &ExperimentReport) -> Option<String> {
    let curve = report.early_curve.as_ref()?;
    let mut out = String::from("offset,n_test,accuracy_mean,accuracy_std,recession_f1_mean,recession_f1_std\n");
    for p in curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.offset, p.n_test, p.accuracy.mean, p.accuracy.std, p.recession_f1.mean, p.recession_f1.std
        );
    }
    Some(out)
}

fn grid_csv(report: &ExperimentReport) -> Option<String> {
    let s = report.sensitivity.as_ref()?;
    let mut out = String::from("series,factor,recession_start,onset,lead_months\n");
    for p in &s.grid {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(&p.series),
            p.factor,
            p.recession_start,
            opt(p.onset),
            opt(p.lead_months)
        );
    }
    Some(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    row: &'a str,
    seed: u64,
    best_epoch: usize,
    loss_weights: LossWeights,
    architecture: &'a Architecture,
    test: RunMetrics,
    checkpoint: String,
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    written.push(path);
    Ok(())
}

/// Writes the report, its CSVs, checkpoints with manifests, and the
/// timing file into `dir`. Returns the paths written.
pub fn emit_report(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let report = &output.report;
    let name = report.experiment.name();
    let mut written = Vec::new();
    write(dir, &format!("{name}.json"), &pretty(report)?, &mut written)?;
    write(dir, &format!("{name}.csv"), &table_csv(report), &mut written)?;
    write(dir, &format!("{name}_probabilities.csv"), &probabilities_csv(report), &mut written)?;
    if let Some(csv) = curve_csv(report) {
        write(dir, &format!("{name}_curve.csv"), &csv, &mut written)?;
    }
    if let Some(csv) = grid_csv(report) {
        write(dir, &format!("{name}_grid.csv"), &csv, &mut written)?;
    }
    if !output.models.is_empty() {
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        for m in &output.models {
            let stem = format!("{name}_{}_seed{}", slug(&m.row), m.seed);
            let file = format!("{stem}.json");
            let path = ckpt_dir.join(&file);
            write_checkpoint(&m.params, &path)?;
            written.push(path);
            let manifest = Manifest {
                config_hash: &report.config_hash,
                row: &m.row,
                seed: m.seed,
                best_epoch: m.best_epoch,
                loss_weights: m.loss_weights,
                architecture: &m.architecture,
                test: m.test,
                checkpoint: file,
            };
            write(&ckpt_dir, &format!("{stem}.manifest.json"), &pretty(&manifest)?, &mut written)?;
        }
    }
    write(dir, TIMING_FILE, &pretty(&output.timing)?, &mut written)?;
    Ok(written)
}

pub fn read_report_json(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(ExperimentError::from)
}
