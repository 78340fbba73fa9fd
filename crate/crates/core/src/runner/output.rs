use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ExperimentResults, ResultRow};
use crate::error::Result;

pub const RAW_HEADER: &str = "dataset,method,fold,seed,nll,metric,ensemble_size,models_trained,wall_time_s";
pub const SUMMARY_HEADER: &str = "dataset,method,nll_mean,nll_std,metric_mean,metric_std";
pub const TREND_HEADER: &str = "dataset,method,ensemble_size,nll,metric";
pub const FAILURES_HEADER: &str = "dataset,method,fold,error";

/// Mean and population standard deviation over folds for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub metric_mean: f64,
    pub metric_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per `(dataset, method)` in first-seen order.
pub fn summarize(raw: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in raw {
        if !keys.contains(&(&r.dataset, &r.method)) {
            keys.push((&r.dataset, &r.method));
        }
    }
    keys.into_iter()
        .map(|(dataset, method)| {
            let rows: Vec<&ResultRow> = raw
                .iter()
                .filter(|r| r.dataset == dataset && r.method == method)
                .collect();
            let (nll_mean, nll_std) = mean_std(&rows.iter().map(|r| r.nll).collect::<Vec<_>>());
            let (metric_mean, metric_std) = mean_std(&rows.iter().map(|r| r.metric).collect::<Vec<_>>());
            SummaryRow {
                dataset: dataset.to_string(),
                method: method.to_string(),
                nll_mean,
                nll_std,
                metric_mean,
                metric_std,
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_csv(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results_raw.csv`, `results_summary.csv`, `trend.csv` and
/// `failures.csv` into `dir`, creating it if needed.
pub fn write_results(results: &ExperimentResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(
        &dir.join("results_raw.csv"),
        RAW_HEADER,
        results.raw.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{:.3}",
                csv_field(&r.dataset),
                csv_field(&r.method),
                r.fold,
                r.seed,
                r.nll,
                r.metric,
                r.ensemble_size,
                r.models_trained,
                r.wall_time_s
            )
        }),
    )?;
    write_csv(
        &dir.join("results_summary.csv"),
        SUMMARY_HEADER,
        summarize(&results.raw).iter().map(|s| {
            format!(
                "{},{},{},{},{},{}",
                csv_field(&s.dataset),
                csv_field(&s.method),
                s.nll_mean,
                s.nll_std,
                s.metric_mean,
                s.metric_std
            )
        }),
    )?;
    write_csv(
        &dir.join("trend.csv"),
        TREND_HEADER,
        results.trend.iter().map(|t| {
            format!(
                "{},{},{},{},{}",
                csv_field(&t.dataset),
                csv_field(&t.method),
                t.ensemble_size,
                t.nll,
                t.metric
            )
        }),
    )?;
    write_csv(
        &dir.join("failures.csv"),
        FAILURES_HEADER,
        results.failures.iter().map(|f| {
            format!(
                "{},{},{},{}",
                csv_field(&f.dataset),
                csv_field(&f.method),
                f.fold,
                csv_field(&f.error)
            )
        }),
    )
}
