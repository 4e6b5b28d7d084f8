//! `relage`: synthetic cohorts, graph construction, training, evaluation and
//! attribution for relational methylation age models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relage_core::Error;
use serde_json::json;

use crate::commands::Run;
use crate::config::Config;

#[derive(Parser)]
#[command(name = "relage", version, about = "Relational graph age regression from DNA methylation")]
struct Cli {
    /// JSON configuration file; defaults apply to absent keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set training.lr=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic cohort with a planted aging signal.
    Synth,
    /// Split the cohort and build the three relation graphs.
    BuildGraphs,
    /// Train on the split and write parameters and the epoch log.
    Train,
    /// Score the trained model on the held-out test samples.
    Evaluate,
    /// Age-acceleration tables for test and disease samples.
    AaReport,
    /// Integrated gradients and branch occlusion on test samples.
    Explain,
    /// Retrain with graph subsets and tabulate test metrics.
    Ablate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::BuildGraphs => "build-graphs",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::AaReport => "aa-report",
            Command::Explain => "explain",
            Command::Ablate => "ablate",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = Config::load(cli.config.as_deref(), &cli.overrides).and_then(|cfg| {
        let run = Run::new(cfg);
        let summary = match cli.command {
            Command::Synth => run.synth(),
            Command::BuildGraphs => run.build_graphs(),
            Command::Train => run.train(),
            Command::Evaluate => run.evaluate(),
            Command::AaReport => run.aa_report(),
            Command::Explain => run.explain(),
            Command::Ablate => run.ablate(),
        }?;
        Ok((run.dir, summary))
    });
    match result {
        Ok((dir, summary)) => {
            let line = json!({"command": cli.command.name(), "status": "ok", "run_dir": dir, "result": summary});
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("relage {}: {e}", cli.command.name());
            let line = json!({"command": cli.command.name(), "status": "error", "message": e.to_string()});
            println!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
