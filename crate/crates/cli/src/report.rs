//! JSON reports written by the eval subcommands and their CSV exports.
//!
//! CSV files use fixed headers, a fixed row order and six decimals:
//!
//! | report | header |
//! |---|---|
//! | retrieval | `direction,K,value` |
//! | selective | `coverage,risk,source` |
//! | robustness | `kind,severity,K,ratio` (`NA` when the clean recall is zero) |

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use probembed::eval::{Direction, RobustnessEntry, SelectiveSummary};
use probembed::trainer::{GradCheckReport, Scoring};
use probembed::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RETRIEVAL_HEADER: &str = "direction,K,value";
pub const RISK_COVERAGE_HEADER: &str = "coverage,risk,source";
pub const ROBUSTNESS_HEADER: &str = "kind,severity,K,ratio";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub direction: Direction,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutput {
    pub scoring: Scoring,
    pub n_queries: usize,
    /// Sum over every row; equals RSUM when the cut-offs are 1, 5, 10, 100.
    pub rsum: f64,
    pub rows: Vec<RecallRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutput {
    pub n_classes: usize,
    pub n_images: usize,
    pub mean: f64,
    /// Per-class recall in percent; `null` for classes without test images.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveOutput {
    pub k: usize,
    pub summaries: Vec<SelectiveSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOutput {
    pub n_queries: usize,
    pub entries: Vec<RobustnessEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutput {
    pub batch_size: usize,
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub batches: Vec<GradCheckReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum Report {
    Retrieval(RetrievalOutput),
    ZeroShot(ZeroShotOutput),
    Selective(SelectiveOutput),
    Robustness(RobustnessOutput),
    GradCheck(GradCheckOutput),
}

impl Report {
    pub fn name(&self) -> &'static str {
        match self {
            Report::Retrieval(_) => "retrieval",
            Report::ZeroShot(_) => "zero_shot",
            Report::Selective(_) => "selective",
            Report::Robustness(_) => "robustness",
            Report::GradCheck(_) => "grad_check",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Core(Error::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(report).expect("reports serialize");
    json.push('\n');
    write_text(path, &json)
}

pub fn read_report(path: &Path) -> Result<Report, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Core(Error::Format { path: path.to_path_buf(), reason: e.to_string() }))
}

/// CSV text for `report`; zero-shot and gradient-check reports have no CSV form.
pub fn to_csv(report: &Report) -> Result<String, CliError> {
    let mut out = String::new();
    match report {
        Report::Retrieval(r) => {
            out.push_str(RETRIEVAL_HEADER);
            out.push('\n');
            for row in &r.rows {
                writeln!(out, "{},{},{:.6}", row.direction, row.k, row.value).unwrap();
            }
        }
        Report::Selective(s) => {
            out.push_str(RISK_COVERAGE_HEADER);
            out.push('\n');
            for summary in &s.summaries {
                for curve in &summary.curves {
                    for &(coverage, risk) in &curve.points {
                        writeln!(out, "{coverage:.6},{risk:.6},{}_{}", summary.direction, curve.confidence_source)
                            .unwrap();
                    }
                }
            }
        }
        Report::Robustness(r) => {
            out.push_str(ROBUSTNESS_HEADER);
            out.push('\n');
            for e in &r.entries {
                let ratio = e.ratio.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
                writeln!(out, "{},{},{},{ratio}", e.kind, e.severity, e.k).unwrap();
            }
        }
        other => {
            return Err(CliError::Core(Error::InvalidInput(format!("{} reports have no CSV export", other.name()))));
        }
    }
    Ok(out)
}

pub fn export_csv(report: &Report, path: &Path) -> Result<(), CliError> {
    write_text(path, &to_csv(report)?)
}
