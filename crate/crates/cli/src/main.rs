mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use equifourier::Error;

use commands::Output;

#[derive(Parser)]
#[command(name = "equifourier", version, about = "Sampling grids, orthogonality diagnostics, equivariance sweeps, toy training and layer benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration entry, e.g. `--set train.epochs=5`. Values
    /// are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Independent (model, N, seed) cells to run at once.
    #[arg(long, default_value_t = 1, global = true)]
    parallel: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write sample grids and their spacing statistics.
    Grid,
    /// Orthogonality metrics of the sampling matrices over the N sweep.
    Diag,
    /// Layer and model equivariance errors over the N sweep.
    Equivariance,
    /// Train every configured model on the synthetic shape dataset.
    Train,
    /// Time the nonlinear layers against N and fit a line.
    Bench,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::InvalidInput(_) | Error::Format(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> equifourier::Result<Vec<PathBuf>> {
        let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
        if cli.parallel == 0 {
            return Err(Error::Config("--parallel must be at least 1".into()));
        }
        let out = Output::new(&cfg.output_dir);
        out.write("config.json", &serde_json::to_string_pretty(&cfg)?)?;
        match cli.command {
            Command::Grid => commands::grid(&cfg, &out),
            Command::Diag => commands::diag(&cfg, &out),
            Command::Equivariance => commands::equivariance(&cfg, &out, cli.parallel),
            Command::Train => commands::train_all(&cfg, &out, cli.parallel),
            Command::Bench => commands::bench(&cfg, &out),
        }
    };
    match run() {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
