//! `pxsub`: degrade datasets, run and train constrained cascades, evaluate.
//!
//! Exit status: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure (a divergence guard tripped).

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Assignments, RunConfig};

#[derive(Parser)]
#[command(name = "pxsub", version, about = "Super-resolution under a hard image-formation constraint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand understands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment; wins over the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    /// Scale factor (1-4).
    #[arg(long, short = 's')]
    scale: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Produce LR observations `<stem>_x<s>.png` plus a manifest.
    Degrade(commands::DegradeArgs),
    /// Super-resolve LR images with the configured cascade.
    Sr(commands::SrArgs),
    /// Train per-stage network weights on paired LR/HR images.
    Train(commands::TrainArgs),
    /// Score SR images against ground truth.
    Eval(commands::EvalArgs),
    /// Measure how well SR images reproduce their LR observations.
    CheckConstraint(commands::CheckArgs),
}

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<pxsub::Error> for Failure {
    fn from(e: pxsub::Error) -> Self {
        use pxsub::ErrorClass;
        match e.class() {
            ErrorClass::Usage => Failure::usage(e.to_string()),
            ErrorClass::Data => Failure::data(e.to_string()),
            ErrorClass::Numeric => Failure::numeric(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::data(format!("JSON: {e}"))
    }
}

pub type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut a = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            Assignments::parse_text(&text)?
        }
        None => Assignments::default(),
    };
    let mut flags = Assignments::default();
    for pair in &common.set {
        flags.set_pair(pair)?;
    }
    if let Some(s) = common.scale {
        flags.set("scale", s.to_string());
    }
    a.extend(flags);
    Ok(RunConfig::from_assignments(&a)?)
}

fn run(cli: Cli) -> CmdResult {
    let (common, cmd) = match &cli.command {
        Command::Degrade(a) => (&a.common, &cli.command),
        Command::Sr(a) => (&a.common, &cli.command),
        Command::Train(a) => (&a.common, &cli.command),
        Command::Eval(a) => (&a.common, &cli.command),
        Command::CheckConstraint(a) => (&a.common, &cli.command),
    };
    let mut cfg = load_config(common)?;
    match cmd {
        Command::Degrade(a) => a.apply(&mut cfg)?,
        Command::Sr(a) => a.apply(&mut cfg)?,
        Command::Train(a) => a.apply(&mut cfg)?,
        Command::Eval(a) => a.apply(&mut cfg)?,
        Command::CheckConstraint(a) => a.apply(&mut cfg)?,
    }
    // Flag values must survive a dump/reparse like file values do.
    let cfg = RunConfig::parse_text(&cfg.dump())?;
    if common.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    match cmd {
        Command::Degrade(_) => commands::degrade(&cfg),
        Command::Sr(a) => commands::sr(&cfg, a),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(a) => commands::eval(&cfg, a),
        Command::CheckConstraint(a) => commands::check_constraint(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
