//! Metric reports: a fixed-width text table and a structured JSON form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "fogsight-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAp {
    pub cls: String,
    pub ap: f64,
}

/// One line of a results table. Metrics a row does not measure are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    /// `dehaze`, `detect` or `ood`.
    pub table: String,
    pub variant: String,
    pub condition: String,
    pub ssim_global: Option<f64>,
    pub ssim_gaussian: Option<f64>,
    pub psnr: Option<f64>,
    pub psnr_bytes: Option<f64>,
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassAp>,
    pub images: usize,
    pub skipped: usize,
}

impl ReportRow {
    pub fn new(table: &str, variant: &str, condition: &str) -> Self {
        Self {
            table: table.to_string(),
            variant: variant.to_string(),
            condition: condition.to_string(),
            ssim_global: None,
            ssim_gaussian: None,
            psnr: None,
            psnr_bytes: None,
            map: None,
            per_class: Vec::new(),
            images: 0,
            skipped: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            format: REPORT_FORMAT.to_string(),
            version: REPORT_VERSION,
            seed,
            config_hash: config_hash.into(),
            rows: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Structured,
}

const COLUMNS: [(&str, usize); 9] = [
    ("table", 7),
    ("variant", 22),
    ("condition", 10),
    ("SSIM", 8),
    ("SSIM-11", 8),
    ("PSNR", 8),
    ("PSNR-255", 8),
    ("mAP", 8),
    ("N", 5),
];

fn num(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.4}"),
    }
}

fn text_table(r: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "seed {}  config {}", r.seed, r.config_hash);
    let mut header = String::new();
    let mut rule = String::new();
    for (i, (name, w)) in COLUMNS.iter().enumerate() {
        if i > 0 {
            header.push_str("  ");
            rule.push_str("  ");
        }
        let _ = write!(header, "{name:<w$}");
        rule.push_str(&"-".repeat(*w));
    }
    out.push_str(header.trim_end());
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for row in &r.rows {
        let cells = [
            row.table.clone(),
            row.variant.clone(),
            row.condition.clone(),
            num(row.ssim_global),
            num(row.ssim_gaussian),
            num(row.psnr),
            num(row.psnr_bytes),
            num(row.map),
            row.images.to_string(),
        ];
        let mut line = String::new();
        for (i, (cell, (_, w))) in cells.iter().zip(COLUMNS.iter()).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i >= 3 {
                let _ = write!(line, "{cell:>w$}");
            } else {
                let _ = write!(line, "{cell:<w$}");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Renders a report. Both forms are deterministic functions of the report.
pub fn emit_report(report: &MetricReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => text_table(report),
        ReportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

pub fn write_report(report: &MetricReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, emit_report(report, format)).map_err(|e| Error::io(path, e))
}

pub fn parse_report(text: &str, origin: &Path) -> Result<MetricReport> {
    let r: MetricReport = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if r.format != REPORT_FORMAT {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            reason: format!("not a report: format {:?}", r.format),
        });
    }
    Ok(r)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}
