use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ideaforest_cli::{
    bootstrap_config, cmd_analyze, cmd_elo, cmd_run, cmd_simulate, CliError, RunOptions, SimulateOptions,
};

#[derive(Debug, Parser)]
#[command(name = "ideaforest", version, about = "Tree-search agent experiments and ideation-diversity reports")]
struct Cli {
    /// Seed: replaces the run's seed list, offsets simulated seeds, seeds the bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel task x seed units for `run`.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Bootstrap resamples for confidence intervals.
    #[arg(long, global = true, default_value_t = 10_000)]
    resamples: usize,
    /// Confidence level of the intervals.
    #[arg(long, global = true, default_value_t = 0.95)]
    confidence: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured scaffold on every task x seed.
    Run { config: PathBuf },
    /// Simulate the controlled experiment.
    Simulate {
        /// Scenario file, or `broken-arch` / `null`.
        #[arg(default_value = "broken-arch")]
        scenario: String,
        /// Seeds per agent; the scenario's own count by default.
        #[arg(long)]
        seeds: Option<u64>,
        /// Comma-separated similarity biases; agents become copies of the first one.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        /// Skip writing trajectory logs.
        #[arg(long)]
        no_logs: bool,
    },
    /// Tables and charts from a directory of trajectory logs.
    Analyze { log_dir: PathBuf },
    /// Elo ratings from the head-to-heads in one or more log directories.
    Elo {
        #[arg(required = true)]
        log_dirs: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    let bootstrap = || bootstrap_config(cli.resamples, cli.confidence, seed.unwrap_or(0));
    match cli.command {
        Command::Run { config } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("runs"));
            let summary = cmd_run(
                &config,
                &RunOptions {
                    out: out.clone(),
                    workers: cli.workers,
                    seed,
                },
            )?;
            println!(
                "run {}: {} executed, {} already complete -> {}",
                summary.run_id,
                summary.executed,
                summary.skipped,
                out.display()
            );
        }
        Command::Simulate {
            scenario,
            seeds,
            sweep,
            no_logs,
        } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("sim"));
            let report = cmd_simulate(&SimulateOptions {
                scenario,
                out: out.clone(),
                n_seeds: seeds,
                first_seed: seed.unwrap_or(0),
                sweep,
                write_logs: !no_logs,
                bootstrap: bootstrap()?,
            })?;
            print!("{}", report.metrics_csv());
            println!("-> {}", out.display());
        }
        Command::Analyze { log_dir } => {
            let out = cli.out.unwrap_or_else(|| log_dir.join("analysis"));
            let summary = cmd_analyze(&log_dir, &out, &bootstrap()?)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} agent(s) -> {}", summary.agents.len(), out.display());
        }
        Command::Elo { log_dirs } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("."));
            let table = cmd_elo(&log_dirs, &out)?;
            for (agent, r) in &table.ratings {
                println!("{agent}\t{:.1}\t{}", r.rating, r.n_matches);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
