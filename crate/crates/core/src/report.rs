//! Run reports and metric tables on disk.
//!
//! JSON files round-trip exactly through [`read_json`]. CSV files are for
//! people and spreadsheets; every numeric field has 4 decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{PctError, Result};
use crate::fairness::{round_half_up, GroupMetrics, PublishedRow, PUBLISHED_GROUPS, PUBLISHED_RFW};
use crate::pipeline::{EpochStats, MetricsReport};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";

/// Everything one training run produced. Wall time is the only field that
/// varies between repeated runs; the metrics are also written on their own
/// so that they can be compared byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub epochs: Vec<EpochStats>,
    pub metrics: MetricsReport,
    pub wall_secs: f64,
    pub checkpoint: Option<String>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| PctError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PctError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PctError::Format(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PctError::io(path, e))
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

/// Long-format table: `metric,target_fpr,group,value`. Summary rows use the
/// group names `ave`, `std`, `threshold`, `pooled` and `bias_degree`.
pub fn metrics_csv(m: &MetricsReport) -> String {
    let mut out = String::from("metric,target_fpr,group,value\n");
    let mut row = |metric: &str, target: &str, group: &str, value: f64| {
        writeln!(out, "{metric},{target},{group},{}", f4(value)).expect("writing to a String");
    };
    let acc = &m.accuracy;
    for ((name, v), t) in m.groups.iter().zip(&acc.metrics.values).zip(&acc.thresholds) {
        row("accuracy", "", name, *v);
        row("accuracy_threshold", "", name, *t);
    }
    row("accuracy", "", "ave", acc.metrics.ave);
    row("accuracy", "", "std", acc.metrics.std);
    for (name, v) in m.groups.iter().zip(&m.auc) {
        row("auc", "", name, *v);
    }
    for p in &m.fpr {
        let target = format!("{}", p.target_fpr);
        for (name, v) in m.groups.iter().zip(&p.metrics.values) {
            row("fpr", &target, name, *v);
        }
        row("fpr", &target, "ave", p.metrics.ave);
        row("fpr", &target, "std", p.metrics.std);
        row("fpr", &target, "threshold", p.threshold);
        row("fpr", &target, "pooled", p.pooled_fpr);
        row("fpr", &target, "bias_degree", p.metrics.bias_degree.unwrap_or(f64::NAN));
    }
    out
}

/// Writes `metrics.json` and `metrics.csv` into `dir`.
pub fn write_metrics(dir: &Path, m: &MetricsReport) -> Result<()> {
    write_json(&dir.join(METRICS_JSON), m)?;
    write_text(&dir.join(METRICS_CSV), &metrics_csv(m))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    read_json(path)
}

/// One published accuracy row pushed through the same summary code as a
/// trained model's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedCheck {
    pub training_set: String,
    pub setting: String,
    pub method: String,
    pub groups: Vec<String>,
    pub metrics: GroupMetrics,
    pub printed_ave: f64,
    pub printed_std: f64,
    /// `ave` and `std` rounded half-up to 2 decimals.
    pub ave_2dp: f64,
    pub std_2dp: f64,
    pub matches: bool,
}

pub fn published_check(row: &PublishedRow) -> Result<PublishedCheck> {
    let metrics = GroupMetrics::from_values(row.accuracies.to_vec())?;
    let ave_2dp = round_half_up(metrics.ave, 2);
    let std_2dp = round_half_up(metrics.std, 2);
    Ok(PublishedCheck {
        training_set: row.training_set.into(),
        setting: row.setting.into(),
        method: row.method.into(),
        groups: PUBLISHED_GROUPS.iter().map(|s| s.to_string()).collect(),
        matches: (ave_2dp - row.ave).abs() < 1e-9 && (std_2dp - row.std).abs() < 1e-9,
        metrics,
        printed_ave: row.ave,
        printed_std: row.std,
        ave_2dp,
        std_2dp,
    })
}

pub fn published_checks() -> Result<Vec<PublishedCheck>> {
    PUBLISHED_RFW.iter().map(published_check).collect()
}

/// Two-decimal fields here because the printed values have two decimals.
pub fn published_csv(checks: &[PublishedCheck]) -> String {
    let mut out = String::from("training_set,setting,method");
    for g in PUBLISHED_GROUPS {
        write!(out, ",{g}").expect("writing to a String");
    }
    out.push_str(",ave,std,printed_ave,printed_std,matches\n");
    for c in checks {
        write!(out, "{},{},{}", c.training_set, c.setting, c.method).expect("writing to a String");
        for v in &c.metrics.values {
            write!(out, ",{v:.2}").expect("writing to a String");
        }
        writeln!(
            out,
            ",{:.2},{:.2},{:.2},{:.2},{}",
            c.ave_2dp, c.std_2dp, c.printed_ave, c.printed_std, c.matches
        )
        .expect("writing to a String");
    }
    out
}
