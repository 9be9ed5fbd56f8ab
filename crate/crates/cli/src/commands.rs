//! The work behind each subcommand, independent of argument parsing.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use catome_core::analysis::{psnr, summarize_traces, PSNR_CAP_DB};
use catome_core::oracle::{run_oracle_suite, OracleReport, OracleSuite};
use catome_core::pipeline::{compare_runs, run_pipeline, timed_runs, PipelineConfig, PipelineMode, RunOutput};
use catome_core::{CheckpointSchedule, EnvFingerprint, TimingSample};
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::CliError;
use crate::report::{param, Report, ReportRow};

/// A timed configuration and its last run.
#[derive(Debug, Clone)]
pub struct Measured {
    pub row: ReportRow,
    pub timing: TimingSample,
    pub output: RunOutput,
}

/// A configuration to time, with its report labels.
struct Candidate {
    pipeline: PipelineConfig,
    param: Option<f64>,
    schedule: Option<String>,
}

/// Times the baseline and every candidate with interleaved repetitions.
/// Speedup and PSNR of each candidate are relative to the baseline, which
/// is returned first.
fn measure(cfg: &RunConfigFile, candidates: Vec<Candidate>) -> Result<(Measured, Vec<Measured>), CliError> {
    let baseline = Candidate {
        pipeline: cfg.baseline(),
        param: None,
        schedule: None,
    };
    let all: Vec<Candidate> = std::iter::once(baseline).chain(candidates).collect();
    let labelled: Vec<(PipelineConfig, String)> = all
        .iter()
        .map(|c| {
            let label = c.pipeline.mode.label();
            log::info!("timing {label} param={:?} schedule={:?}", c.param, c.schedule);
            (c.pipeline.clone(), label.to_owned())
        })
        .collect();
    let runs = timed_runs(&labelled, cfg.warmup, cfg.repetitions)?;
    let reference = runs[0].clone();
    let mut measured = all
        .into_iter()
        .zip(runs)
        .enumerate()
        .map(|(i, (c, run))| {
            let (speedup, psnr_db) = if i == 0 {
                (1.0, PSNR_CAP_DB)
            } else {
                (
                    reference.timing.median_s / run.timing.median_s,
                    psnr(reference.output.final_grid.tokens(), run.output.final_grid.tokens())?,
                )
            };
            Ok(Measured {
                row: ReportRow {
                    mode: c.pipeline.mode.label().to_owned(),
                    param: c.param,
                    schedule: c.schedule,
                    median_time_s: run.timing.median_s,
                    time_spread_s: run.timing.iqr_s,
                    speedup,
                    psnr_db,
                    merge_fraction: run.output.mean_merge_fraction(),
                },
                timing: run.timing,
                output: run.output,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let base = measured.remove(0);
    Ok((base, measured))
}

fn catome(cfg: &RunConfigFile, threshold: f32, schedule: CheckpointSchedule) -> PipelineConfig {
    cfg.baseline().with_mode(PipelineMode::CaTome { threshold, schedule })
}

fn report(command: &str, cfg: &RunConfigFile, threshold: Option<f32>, measured: &[Measured]) -> Report {
    Report {
        command: command.to_owned(),
        config: cfg.clone(),
        resolved_threshold: threshold,
        environment: EnvFingerprint::capture(),
        rows: measured.iter().map(|m| m.row.clone()).collect(),
        timings: measured.iter().map(|m| m.timing.clone()).collect(),
    }
}

/// Baseline, fixed-rate and cached adaptive merging on one configuration.
pub fn bench(cfg: &RunConfigFile) -> Result<(Report, Vec<Measured>), CliError> {
    let threshold = cfg.resolve_threshold()?;
    let schedule = cfg.checkpoint_schedule()?;
    let tome = Candidate {
        pipeline: cfg.baseline().with_mode(PipelineMode::FixedRate { rate: cfg.rate }),
        param: Some(cfg.rate),
        schedule: None,
    };
    let name = schedule.name.clone();
    let ca = Candidate {
        pipeline: catome(cfg, threshold, schedule),
        param: Some(param(threshold)),
        schedule: Some(name),
    };
    let (base, rest) = measure(cfg, vec![tome, ca])?;
    let measured: Vec<Measured> = std::iter::once(base).chain(rest).collect();
    Ok((report("bench", cfg, Some(threshold), &measured), measured))
}

/// Cached adaptive merging across `cfg.thresholds`, one row per threshold.
/// Speedup and PSNR are relative to an (unreported) baseline run.
pub fn sweep_threshold(cfg: &RunConfigFile) -> Result<(Report, Vec<Measured>), CliError> {
    let schedule = cfg.checkpoint_schedule()?;
    let candidates = cfg
        .thresholds
        .iter()
        .map(|&t| Candidate {
            pipeline: catome(cfg, t, schedule.clone()),
            param: Some(param(t)),
            schedule: Some(schedule.name.clone()),
        })
        .collect();
    let (_, measured) = measure(cfg, candidates)?;
    Ok((report("sweep-threshold", cfg, None, &measured), measured))
}

/// Cached adaptive merging across `cfg.schedules`, one row per schedule.
pub fn sweep_schedule(cfg: &RunConfigFile) -> Result<(Report, Vec<Measured>), CliError> {
    let threshold = cfg.resolve_threshold()?;
    let candidates = cfg
        .schedules
        .iter()
        .map(|name| {
            let schedule = CheckpointSchedule::named(name, cfg.steps)?;
            Ok(Candidate {
                param: Some(param(threshold)),
                schedule: Some(schedule.name.clone()),
                pipeline: catome(cfg, threshold, schedule),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (_, measured) = measure(cfg, candidates)?;
    Ok((report("sweep-schedule", cfg, Some(threshold), &measured), measured))
}

/// One line of the Jaccard trace CSV. `step` is the later of the two
/// compared steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block: usize,
    pub step: usize,
    pub mean_distance: f64,
    pub variance: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub config: RunConfigFile,
    pub threshold: f32,
    pub runs: usize,
    pub rows: Vec<TraceRow>,
    /// Per merge-enabled block, the median over steps of the mean distance.
    pub block_medians: Vec<(usize, f64)>,
}

/// Pair-set stability with plans rebuilt at every step, over `runs` seeds
/// starting at `cfg.seed`. Mean and variance are taken across seeds.
pub fn jaccard_trace(cfg: &RunConfigFile, runs: usize) -> Result<TraceReport, CliError> {
    if runs == 0 {
        return Err(CliError::Config("at least one run is required".into()));
    }
    let threshold = cfg.resolve_threshold()?;
    let outputs = (0..runs as u64)
        .map(|i| {
            let mut pipeline = cfg.baseline().with_mode(PipelineMode::Adaptive { threshold });
            pipeline.seed = cfg.seed.wrapping_add(i);
            log::info!("trace run seed={}", pipeline.seed);
            run_pipeline(&pipeline)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut block_medians = Vec::new();
    for block in outputs[0].merge_blocks() {
        let traces = outputs
            .iter()
            .map(|o| o.jaccard_trace(block))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = summarize_traces(&traces)?;
        for n in 0..summary.mean.len() {
            rows.push(TraceRow {
                block,
                step: n + 1,
                mean_distance: summary.mean[n],
                variance: summary.variance[n],
                std_dev: summary.std_dev[n],
            });
        }
        let mut sorted = summary.mean.clone();
        sorted.sort_by(f64::total_cmp);
        block_medians.push((block, catome_core::bench::quantile(&sorted, 0.5)));
    }
    Ok(TraceReport {
        config: cfg.clone(),
        threshold,
        runs,
        rows,
        block_medians,
    })
}

pub fn write_trace(report: &TraceReport, dir: &Path) -> Result<(), CliError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let csv_path = dir.join("jaccard-trace.csv");
    let file = std::fs::File::create(&csv_path).map_err(io(&csv_path))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &report.rows {
        w.serialize(row).map_err(|e| CliError::Report(e.to_string()))?;
    }
    w.flush().map_err(io(&csv_path))?;
    let json_path = dir.join("jaccard-trace.json");
    let file = std::fs::File::create(&json_path).map_err(io(&json_path))?;
    serde_json::to_writer_pretty(file, report).map_err(|e| CliError::Report(e.to_string()))
}

/// Runs the matching oracle suite; any disagreement is an error.
pub fn oracle_check(instances: usize, max_tokens: usize, seed: u64) -> Result<OracleReport, CliError> {
    let report = run_oracle_suite(&OracleSuite {
        instances,
        max_tokens,
        seed,
    })?;
    for m in report.mismatches.iter().take(5) {
        log::error!("instance {}: {}", m.instance, m.description);
    }
    if !report.passed() {
        return Err(CliError::OracleMismatch {
            mismatches: report.mismatches.len(),
            instances,
        });
    }
    Ok(report)
}

/// A quick single-run comparison on a small grid, as readable text.
pub fn demo() -> Result<String, CliError> {
    let base = PipelineConfig {
        height: 32,
        width: 32,
        ..Default::default()
    };
    let schedule = CheckpointSchedule::named("CONFIG_3", base.steps)?;
    let threshold = catome_core::pipeline::calibrate_threshold(&base, 0.6)?;
    let reference = run_pipeline(&base)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{}x{}x{} grid, {} steps, {} blocks (merging in blocks 0 and 3)",
        base.height,
        base.width,
        base.channels,
        base.steps,
        base.stages.len()
    );
    let _ = writeln!(
        out,
        "{:<10} {:>9} {:>8} {:>9} {:>7}",
        "mode", "time (s)", "speedup", "PSNR (dB)", "merged"
    );
    let _ = writeln!(
        out,
        "{:<10} {:>9.3} {:>8.2} {:>9} {:>7}",
        "baseline", reference.total_time_s, 1.0, "-", "-"
    );
    for mode in [
        PipelineMode::FixedRate { rate: 0.5 },
        PipelineMode::CaTome {
            threshold,
            schedule: schedule.clone(),
        },
    ] {
        let run = run_pipeline(&base.with_mode(mode.clone()))?;
        let f = compare_runs(&reference, &run)?;
        let _ = writeln!(
            out,
            "{:<10} {:>9.3} {:>8.2} {:>9.2} {:>6.1}%",
            mode.label(),
            run.total_time_s,
            f.speedup,
            f.psnr_db,
            100.0 * f.candidate_merge_fraction
        );
    }
    let _ = writeln!(
        out,
        "catome: threshold {threshold:.4}, schedule {} ({} recomputations)",
        schedule.name,
        schedule.len()
    );
    Ok(out)
}

/// Prints report rows as an aligned table.
pub fn print_rows<W: Write>(rows: &[ReportRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<9} {:>6} {:<13} {:>10} {:>9} {:>8} {:>9} {:>7}",
        "mode", "param", "schedule", "median(s)", "iqr(s)", "speedup", "PSNR(dB)", "merged"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<9} {:>6} {:<13} {:>10.4} {:>9.4} {:>8.3} {:>9.2} {:>6.1}%",
            r.mode,
            r.param.map_or("-".into(), |p| p.to_string()),
            r.schedule.as_deref().unwrap_or("-"),
            r.median_time_s,
            r.time_spread_s,
            r.speedup,
            r.psnr_db,
            100.0 * r.merge_fraction
        )?;
    }
    Ok(())
}
