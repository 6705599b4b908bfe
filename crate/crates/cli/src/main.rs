//! `reprompt`: one subcommand per pipeline stage, handing off through files
//! in the output directory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reprompt_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "reprompt", version, about = "Reasoning-augmented reprompting laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the train and eval prompt sets.
    GenData(Common),
    /// Fit the supervised warm start on rule-based traces.
    Sft(Common),
    /// Run GRPO from the SFT checkpoint.
    Train(Common),
    /// Score the configured pathways on the eval set.
    Eval(Common),
    /// Reward variance decomposition for the trained policy.
    Variance(Common),
    /// Walk one prompt through policy, synthesizer and rewards.
    Demo {
        /// User prompt, e.g. "a photo of a dog above a cow".
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (same as `seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (same as `out_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted overrides such as `grpo.steps=100`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config file {0} not found")]
    MissingConfig(PathBuf),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingConfig(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidConfig(_) | Error::UnknownSurface(_) | Error::UnrecognizedPrompt => 2,
                Error::Precondition(_) | Error::EmptyEvalSet | Error::Checkpoint(_) => 4,
                _ => 5,
            },
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            let s = out.to_string_lossy().replace('\\', "\\\\").replace('"', "\\\"");
            overrides.push(format!("out_dir=\"{s}\""));
        }
        match &self.config {
            Some(path) if !path.is_file() => Err(CliError::MissingConfig(path.clone())),
            Some(path) => Ok(RunConfig::load(path, &overrides)?),
            None => Ok(RunConfig::build(None, &overrides)?),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, prompt) = match &cli.command {
        Command::GenData(c)
        | Command::Sft(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Variance(c) => (c, None),
        Command::Demo { prompt, common } => (common, Some(prompt.as_str())),
    };
    let cfg = common.resolve()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
    reprompt_core::io::write_atomic(&cfg.out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg)?,
        Command::Sft(_) => commands::sft(&cfg)?,
        Command::Train(_) => commands::train(&cfg)?,
        Command::Eval(_) => commands::eval(&cfg)?,
        Command::Variance(_) => commands::variance(&cfg)?,
        Command::Demo { .. } => commands::demo(&cfg, prompt.expect("demo prompt"))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
