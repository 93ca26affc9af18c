use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpc_dwr_cli::{parse_config, run, workers_from_env, CliError, Experiment};

/// Goal-oriented adaptive optimal control inside a receding-horizon loop.
#[derive(Parser)]
#[command(name = "mpc-dwr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Adaptive solve of one open-loop problem.
    SolveOcp(Common),
    /// Closed-loop MPC run.
    Mpc {
        #[command(flatten)]
        common: Common,
        /// Run the full and the truncated refinement policy side by side.
        #[arg(long)]
        compare_policies: bool,
    },
    /// Sensitivity and indicator decay on a uniform grid.
    Decay(Common),
    /// Closed-loop costs over budgets, α values and both policies.
    Sweep(Common),
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (experiment, common, compare) = match cli.command {
        Command::SolveOcp(c) => (Experiment::SolveOcp, c, false),
        Command::Mpc {
            common,
            compare_policies,
        } => (Experiment::Mpc, common, compare_policies),
        Command::Decay(c) => (Experiment::Decay, c, false),
        Command::Sweep(c) => (Experiment::Sweep, c, false),
    };
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.clone(),
            source,
        })?,
        None => "{}".to_string(),
    };
    let cfg = parse_config(&text, experiment)?;
    let out = common
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("mpc-dwr-out"));
    let workers = workers_from_env()?;
    let summary = run(&cfg, &out, compare, workers)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summaries serialize")
    );
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
