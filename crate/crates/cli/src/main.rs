use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hscorr::stats::with_workers;
use hscorr_cli::verify::{Suite, VerifyConfig};
use hscorr_cli::{kinetics, load_config, reduce, verify, CliError, ExitStatus, RunOptions};

/// Hard-sphere correlation dynamics: verification suites, reduced functions and kinetic runs.
#[derive(Debug, Parser)]
#[command(name = "hscorr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Random seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 uses every core). Results do not depend on it.
    #[arg(long, global = true, env = "HSCORR_WORKERS", default_value_t = 0)]
    workers: usize,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an invariant suite and write a JSON report.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,

        /// Perturb the cumulant coefficients (exercises the failure path).
        #[arg(long, hide = true)]
        tamper_coefficient: bool,

        #[command(flatten)]
        common: Common,
    },
    /// Estimate reduced functions and write JSON lines.
    Reduce {
        #[arg(long)]
        config: PathBuf,

        #[command(flatten)]
        common: Common,
    },
    /// Run DSMC, collision-integral and scaling experiments; write CSV and JSON lines.
    Kinetics {
        #[arg(long)]
        config: PathBuf,

        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
        }
    }
}

fn execute(command: Command) -> Result<ExitStatus, CliError> {
    match command {
        Command::Verify {
            suite,
            tamper_coefficient,
            common,
        } => {
            let opts = common.options();
            let config = VerifyConfig {
                suite,
                seed: opts.seed.unwrap_or(0),
                tampered_coefficient: tamper_coefficient,
            };
            let (reports, path) = with_workers(opts.workers, || verify::run(&config, &opts.out))??;
            for r in &reports {
                println!("{:<28} {:?}  max residual {:.3e}  tolerance {:.1e}", r.check, r.status, r.max_residual, r.tolerance);
            }
            println!("report: {}", path.display());
            Ok(ExitStatus::from_checks(reports.iter().all(|r| r.passed())))
        }
        Command::Reduce { config, common } => {
            let opts = common.options();
            let resolved = reduce::resolve(load_config(&config)?, opts.seed)?;
            let (records, path) = with_workers(opts.workers, || reduce::run(&resolved, &opts.out))??;
            for r in records.iter().filter_map(|r| r.check.as_ref()) {
                println!("{:<20} {:?}  residual {:.3e}  tolerance {:.3e}", r.name, r.status, r.residual, r.tolerance);
            }
            println!("{} records: {}", records.len(), path.display());
            Ok(ExitStatus::from_checks(records.iter().all(|r| r.passed())))
        }
        Command::Kinetics { config, common } => {
            let opts = common.options();
            let resolved = kinetics::resolve(load_config(&config)?, opts.seed)?;
            let (output, files) = with_workers(opts.workers, || kinetics::run(&resolved, &opts.out))??;
            for s in &output.summaries {
                println!("{:<28} {}", s.check, if s.passed { "pass" } else { "FAIL" });
            }
            println!("summary: {}", files.summary.display());
            Ok(ExitStatus::from_checks(output.passed()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ExitStatus::Usage.code() } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(status) => ExitCode::from(status.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_status().code())
        }
    }
}
