use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mdlab_cli::config::{load_config, Preset};
use mdlab_cli::{run, CliError, Command};

#[derive(Parser)]
#[command(name = "mdlab", version, about = "Masked-diffusion decoding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetName {
    LladaV,
    Lavida,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set decode.steps=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy model and write a checkpoint.
    Train(RunArgs),
    /// Fit the prior subspace sidecar for a checkpoint.
    Subspace(RunArgs),
    /// Decode the evaluation scenes.
    Decode(RunArgs),
    /// Decode and write every diagnostic CSV.
    Analyze(RunArgs),
    /// Run the configured ablation grid.
    Ablate(RunArgs),
    /// Summarize an ablation run.
    Report(RunArgs),
    /// Per-step overhead of the interventions.
    Timing(RunArgs),
    /// Check a config and list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Print a preset config.
    Preset { name: PresetName },
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, CliError> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| CliError::Config(format!("--set {s}: expected KEY=VALUE")))
        })
        .collect()
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    mdlab_cli::init_threads()?;
    let (cmd, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Subspace(a) => (Command::Subspace, a),
        Cmd::Decode(a) => (Command::Decode, a),
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::Report(a) => (Command::Report, a),
        Cmd::Timing(a) => (Command::Timing, a),
        Cmd::Validate { config, set } => {
            load_config(&config, &parse_overrides(&set)?)?;
            println!("ok");
            return Ok(());
        }
        Cmd::Preset { name } => {
            let p = match name {
                PresetName::LladaV => Preset::LladaV,
                PresetName::Lavida => Preset::Lavida,
            };
            println!("{}", serde_json::to_string_pretty(&p.config()).expect("serializes"));
            return Ok(());
        }
    };
    let config = load_config(&args.config, &parse_overrides(&args.set)?)?;
    run(cmd, &config, &args.out)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdlab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
