//! Benchmarks, sweeps and reports for the `catome` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{RunConfigFile, ScheduleSpec};
pub use error::{exit, CliError};
pub use report::{read_rows_csv, write_report, write_rows_csv, Report, ReportRow, CSV_HEADER};
