use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reflected_mfg::{Error, Result};
use reflected_mfg_cli::{golden_compare, run_command, CliCommand, RunConfig, RunContext};

#[derive(Parser)]
#[command(
    name = "reflected-mfg",
    version,
    about = "Mean field game laboratory with reflecting boundaries",
    propagate_version = true
)]
struct Cli {
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory, overriding the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Seed override for every stochastic component.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Number of worker threads (defaults to the logical core count).
    #[arg(long, global = true, value_name = "K")]
    jobs: Option<usize>,

    /// Enable the costly paths: kernel assembly and four-player solves.
    #[arg(long, global = true)]
    expensive: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the mean field system and store the value and the flow.
    SolveMfg,
    /// Solve the N-player system on the tensor grid.
    SolveNash,
    /// Evaluate the master field at the initial time.
    EvalMaster,
    /// Run the coupled particle ensembles and report the pathwise gaps.
    Simulate,
    /// Measure convergence to the mean field limit across player counts.
    Converge,
    /// Run the fast invariant suite.
    Check,
    /// Compare a run directory against a stored golden directory.
    GoldenCompare {
        run: PathBuf,
        golden: PathBuf,
        /// Relative tolerance for deterministic values.
        #[arg(long, default_value_t = 1e-9)]
        rtol: f64,
    },
}

fn dispatch(cli: Cli) -> Result<u8> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot size the worker pool: {e}")))?;
    }

    if let Command::GoldenCompare { run, golden, rtol } = &cli.command {
        let report = golden_compare(run, golden, *rtol)?;
        for failure in &report.failures {
            println!("golden mismatch: {failure}");
        }
        println!(
            "golden-compare: {} files, {} mismatches",
            report.files_checked,
            report.failures.len()
        );
        return Ok(if report.passed() { 0 } else { 4 });
    }

    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output.directory = out.clone();
    }
    config.validate()?;

    let command = match cli.command {
        Command::SolveMfg => CliCommand::SolveMfg,
        Command::SolveNash => CliCommand::SolveNash,
        Command::EvalMaster => CliCommand::EvalMaster,
        Command::Simulate => CliCommand::Simulate,
        Command::Converge => CliCommand::Converge,
        Command::Check => CliCommand::Check,
        Command::GoldenCompare { .. } => unreachable!("handled above"),
    };
    let ctx = RunContext::new(config, cli.expensive, cli.jobs);
    run_command(command, &ctx)?;
    println!("{}: artifacts in {}", command.name(), ctx.out().display());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    // Usage errors are configuration errors (exit 1); help and version are
    // not errors at all.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
