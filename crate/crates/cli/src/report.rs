//! Run manifests, metric tables and file output.

use std::collections::BTreeMap;
use std::path::Path;

use deepjoint::data::Dataset;
use deepjoint::eval::{DeltaRow, Interval, MetricReport};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

pub const VERSION: &str = concat!("deepjoint-", env!("CARGO_PKG_VERSION"));

/// Everything needed to rerun an experiment exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub dataset_fingerprint: String,
    pub n_patients: usize,
    /// Stage-1 and stage-2 epochs executed, per variant.
    pub stage_epochs: BTreeMap<String, [usize; 2]>,
    pub wall_clock_seconds: f64,
}

/// SHA-256 over the canonical JSON form of the dataset.
pub fn fingerprint(ds: &Dataset) -> CliResult<String> {
    let bytes = serde_json::to_vec(ds).map_err(deepjoint::Error::from)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(deepjoint::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

fn table(header: Vec<String>, rows: Vec<Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Core(deepjoint::Error::from(e));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Core(deepjoint::Error::Data(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cells(i: &Interval) -> [String; 3] {
    [format!("{:.6}", i.mean), format!("{:.6}", i.lo), format!("{:.6}", i.hi)]
}

fn horizon_header(first: &str, horizons: &[f64]) -> Vec<String> {
    let mut h = vec![first.to_string()];
    for tau in horizons {
        h.extend([format!("{tau}d_mean"), format!("{tau}d_lo"), format!("{tau}d_hi")]);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    CIndex,
    Brier,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::CIndex => "c_index",
            Metric::Brier => "brier",
        }
    }
}

/// One row per horizon for a single model.
pub fn horizon_table(report: &MetricReport) -> CliResult<String> {
    let header = ["horizon", "c_index_mean", "c_index_lo", "c_index_hi", "brier_mean", "brier_lo", "brier_hi"];
    let rows = report
        .horizons
        .iter()
        .map(|h| {
            let mut r = vec![h.horizon.to_string()];
            r.extend(cells(&h.c_index));
            r.extend(cells(&h.brier));
            r
        })
        .collect();
    table(header.iter().map(|s| s.to_string()).collect(), rows)
}

/// Rows are variants, columns horizons.
pub fn variant_table(reports: &[(String, MetricReport)], metric: Metric, horizons: &[f64]) -> CliResult<String> {
    let rows = reports
        .iter()
        .map(|(name, report)| {
            let mut r = vec![name.clone()];
            for h in &report.horizons {
                r.extend(cells(match metric {
                    Metric::CIndex => &h.c_index,
                    Metric::Brier => &h.brier,
                }));
            }
            r
        })
        .collect();
    table(horizon_header("variant", horizons), rows)
}

/// Transfer-minus-in-domain differences, rows are variants.
pub fn delta_table(deltas: &[(String, Vec<DeltaRow>)], metric: Metric, horizons: &[f64]) -> CliResult<String> {
    let rows = deltas
        .iter()
        .map(|(name, rows)| {
            let mut r = vec![name.clone()];
            for d in rows {
                r.extend(cells(match metric {
                    Metric::CIndex => &d.c_index,
                    Metric::Brier => &d.brier,
                }));
            }
            r
        })
        .collect();
    table(horizon_header("variant", horizons), rows)
}
