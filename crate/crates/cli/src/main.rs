use std::path::PathBuf;
use std::process::ExitCode;

use catome_cli::commands;
use catome_cli::{exit, write_report, CliError, RunConfigFile};
use clap::{Args, Parser, Subcommand};

/// Token merging benchmarks on a surrogate denoising pipeline.
#[derive(Parser)]
#[command(name = "catome", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Report directory, overriding `output_dir` from the configuration.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Time baseline, fixed-rate and cached adaptive merging.
    Bench(RunArgs),
    /// Cached adaptive merging across a list of thresholds.
    SweepThreshold {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated thresholds, overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f32>>,
    },
    /// Cached adaptive merging across the named checkpoint schedules.
    SweepSchedule(RunArgs),
    /// Jaccard distance between merge pairs of adjacent steps.
    JaccardTrace {
        #[command(flatten)]
        run: RunArgs,
        /// Seeds to average over.
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Update step size, overriding the configuration.
        #[arg(long)]
        step_size: Option<f32>,
    },
    /// Check the fast matching against the naive reference.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// A small, fast comparison printed to the terminal.
    Demo,
}

fn load(args: &RunArgs) -> Result<(RunConfigFile, PathBuf), CliError> {
    let cfg = match &args.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn emit(report: &catome_cli::Report, out: &std::path::Path, stem: &str) -> Result<(), CliError> {
    commands::print_rows(&report.rows, std::io::stdout().lock()).map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })?;
    let (csv, json) = write_report(report, out, stem)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Bench(args) => {
            let (cfg, out) = load(&args)?;
            let (report, _) = commands::bench(&cfg)?;
            emit(&report, &out, "bench")
        }
        Command::SweepThreshold { run, thresholds } => {
            let (mut cfg, out) = load(&run)?;
            if let Some(t) = thresholds {
                cfg.thresholds = t;
                cfg.validate()?;
            }
            let (report, _) = commands::sweep_threshold(&cfg)?;
            emit(&report, &out, "sweep-threshold")
        }
        Command::SweepSchedule(args) => {
            let (cfg, out) = load(&args)?;
            let (report, _) = commands::sweep_schedule(&cfg)?;
            emit(&report, &out, "sweep-schedule")
        }
        Command::JaccardTrace { run, runs, step_size } => {
            let (mut cfg, out) = load(&run)?;
            if let Some(eta) = step_size {
                cfg.step_size = eta;
                cfg.validate()?;
            }
            let report = commands::jaccard_trace(&cfg, runs)?;
            for (block, median) in &report.block_medians {
                println!("block {block}: median adjacent-step Jaccard distance {median:.4}");
            }
            commands::write_trace(&report, &out)?;
            println!("wrote {}", out.join("jaccard-trace.csv").display());
            Ok(())
        }
        Command::OracleCheck {
            instances,
            max_tokens,
            seed,
        } => {
            let report = commands::oracle_check(instances, max_tokens, seed)?;
            println!(
                "{} instances, 0 mismatches, {:.2} s",
                report.instances, report.elapsed_s
            );
            Ok(())
        }
        Command::Demo => {
            print!("{}", commands::demo()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
