//! `evobt` -- behavior-tree evolution workbench CLI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evobt::harness::{self, Overrides};

#[derive(Parser)]
#[command(name = "evobt", version, about = "Behavior-tree evolution workbench")]
struct Cli {
    /// Override the config's output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    master_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Evolve { config: PathBuf },
    /// Execute one tree for a single episode and print the transcript.
    RunBt {
        file: PathBuf,
        #[arg(long, default_value = "scenario1")]
        scenario: String,
        #[arg(long, default_value = "det")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate, validate, and gate seed trees; write them as .bt files.
    Seed { config: PathBuf },
    /// Run several configs and emit a long-format comparison CSV.
    Compare { configs: Vec<PathBuf> },
    /// Parse and contextually validate a .bt file.
    Validate { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides { output_dir: cli.output_dir, master_seed: cli.master_seed };
    let result = match &cli.command {
        Command::Evolve { config } => harness::cmd_evolve(config, &overrides),
        Command::RunBt { file, scenario, profile, seed } => {
            harness::cmd_run_bt(file, scenario, profile, *seed)
        }
        Command::Seed { config } => harness::cmd_seed(config, &overrides),
        Command::Compare { configs } => harness::cmd_compare(configs, &overrides),
        Command::Validate { file } => harness::cmd_validate(file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
