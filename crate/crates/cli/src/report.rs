//! CSV and JSON reports.
//!
//! The CSV has the fixed header [`CSV_HEADER`]; empty `param` or `schedule`
//! fields mean "not applicable". The JSON document carries the same rows
//! together with the configuration that produced them, the raw timing
//! samples and the machine they were taken on.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use catome_core::{EnvFingerprint, TimingSample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::CliError;

pub const CSV_HEADER: &str = "mode,param,schedule,median_time_s,time_spread_s,speedup,psnr_db,merge_fraction";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    /// Threshold or merge rate.
    pub param: Option<f64>,
    pub schedule: Option<String>,
    pub median_time_s: f64,
    /// Interquartile range of the repetition times.
    pub time_spread_s: f64,
    /// Baseline median time over this row's median time.
    pub speedup: f64,
    pub psnr_db: f64,
    pub merge_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: RunConfigFile,
    /// The merge threshold actually used, after calibration.
    pub resolved_threshold: Option<f32>,
    pub environment: EnvFingerprint,
    pub rows: Vec<ReportRow>,
    pub timings: Vec<TimingSample>,
}

pub fn write_rows_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Report(e.to_string()))
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| CliError::Report(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(CliError::Report(format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| CliError::Report(e.to_string()))
}

fn create(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::create(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`, creating `dir` if
/// needed. Returns both paths.
pub fn write_report(report: &Report, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), CliError> {
    if report.rows.is_empty() {
        return Err(CliError::Report("refusing to write a report without rows".into()));
    }
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let csv_path = dir.join(format!("{stem}.csv"));
    write_rows_csv(&report.rows, create(&csv_path)?)?;
    let json_path = dir.join(format!("{stem}.json"));
    serde_json::to_writer_pretty(create(&json_path)?, report).map_err(|e| CliError::Report(e.to_string()))?;
    Ok((csv_path, json_path))
}

/// Converts an `f32` parameter to the `f64` with the same shortest decimal
/// form, so 0.7 is reported as 0.7 rather than 0.699999988.
pub fn param(value: f32) -> f64 {
    value.to_string().parse().expect("float display parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_row_layout() {
        let row = ReportRow {
            mode: "baseline".into(),
            param: None,
            schedule: None,
            median_time_s: 1.25,
            time_spread_s: 0.5,
            speedup: 1.0,
            psnr_db: 200.0,
            merge_fraction: 0.0,
        };
        let mut buf = Vec::new();
        write_rows_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![CSV_HEADER, "baseline,,,1.25,0.5,1.0,200.0,0.0"]);
    }

    #[test]
    fn params_keep_short_form() {
        assert_eq!(param(0.7), 0.7);
        assert_eq!(param(1.0), 1.0);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(read_rows_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
