use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankreg::cli::{run, Command, Options};
use rankreg::config::Arm;

#[derive(Parser)]
#[command(version, about = "Regression with self-supervised ranking on synthetic image tasks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// key = value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (replaced atomically).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// baseline, multitask or active.
    #[arg(long, global = true)]
    arm: Option<Arm>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate a dataset with its ranked-group manifest.
    Gen,
    /// Train the selected arm; writes a checkpoint, log and metrics.
    Train,
    /// Evaluate a checkpoint (or a predictions file) on the test split.
    Eval,
    /// Run the active-learning loop.
    Active,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Cmd::Gen => Command::Gen,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Active => Command::Active,
    };
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        arm: cli.arm,
    };
    match run(cmd, &opts) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
