use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use poolal_cli::{cmd_report, cmd_run, cmd_sweep, RunArgs};

#[derive(Parser)]
#[command(name = "poolal", version, about = "Pool-based active learning benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its trajectory.
    Run(RunArgs),
    /// Execute a grid of runs from a sweep file, skipping completed ones.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Export analytics CSVs for every trajectory under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|_| ()),
        Command::Sweep { config, out } => cmd_sweep(config, out).map(|_| ()),
        Command::Report { dir, out } => {
            let out = out.clone().unwrap_or_else(|| dir.join("report"));
            cmd_report(dir, &out).map(|_| ())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
