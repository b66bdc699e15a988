use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;
mod heatmap;

/// A bad invocation or config: reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "iad", version, about = "Industrial anomaly detection: simulate, train, localize, judge, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; omitted keys take their defaults
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set train.lr=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for --set seed=N
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory that receives every output
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut s = self.sets.clone();
        if let Some(seed) = self.seed {
            s.push(format!("seed={seed}"));
        }
        s
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write simulated anomalies (and optionally the texture suite) plus qa.jsonl
    Simulate(Common),
    /// Train one decoder per category and calibrate its threshold
    Train(Common),
    /// Build one few-shot memory bank per category and calibrate its threshold
    Bank(Common),
    /// Localize and judge images with a trained model or bank
    Infer(Common),
    /// Run a full experiment and write report.json, per_category.csv, sweep.csv
    Eval(Common),
    /// Accuracy-vs-threshold table from a verdicts.jsonl file
    Sweep(Common),
}

fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("simulate", |c| c.after_help(commands::simulate_help()))
        .mut_subcommand("train", |c| c.after_help(commands::experiment_help("train")))
        .mut_subcommand("bank", |c| c.after_help(commands::experiment_help("bank")))
        .mut_subcommand("infer", |c| c.after_help(commands::infer_help()))
        .mut_subcommand("eval", |c| c.after_help(commands::experiment_help("eval")))
        .mut_subcommand("sweep", |c| c.after_help(commands::sweep_help()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.cmd {
        Cmd::Simulate(c) => commands::simulate(c),
        Cmd::Train(c) => commands::train(c),
        Cmd::Bank(c) => commands::bank(c),
        Cmd::Infer(c) => commands::infer(c),
        Cmd::Eval(c) => commands::eval(c),
        Cmd::Sweep(c) => commands::sweep(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
