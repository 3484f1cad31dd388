use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod output;
mod report;

#[derive(Parser)]
#[command(name = "eipnet")]
#[command(about = "Simulate and certify passivity-based distributed optimization networks")]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomized split scenario
    Generate {
        #[arg(long)]
        seed: u64,

        #[arg(long)]
        out: PathBuf,

        /// Number of agents
        #[arg(long, default_value_t = eipnet::scenario::DEFAULT_AGENTS)]
        agents: usize,
    },

    /// Evaluate the validation gates of a scenario
    Certify {
        scenario: PathBuf,

        /// Also write the verdicts as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },

    /// Integrate a scenario and write trajectory.csv, lyapunov.csv and summary.txt
    Run {
        scenario: PathBuf,

        #[arg(long)]
        out: PathBuf,

        /// Run even if advisory gates fail; the summary marks the run unsound
        #[arg(long)]
        force: bool,

        #[arg(long)]
        dt: Option<f64>,

        #[arg(long)]
        t_end: Option<f64>,
    },

    /// Print the centralized optimum of the network and of every event group
    Oracle { scenario: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { seed, out, agents } => commands::generate(seed, agents, &out),
        Command::Certify { scenario, csv } => commands::certify(&scenario, csv.as_deref()),
        Command::Run {
            scenario,
            out,
            force,
            dt,
            t_end,
        } => commands::run(&scenario, &out, force, dt, t_end),
        Command::Oracle { scenario } => commands::oracle(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("eipnet: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
