//! Command line front end: runs scenario files and the built-in self-test.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lora_isac_core::scenario::{ScenarioFile, ScenarioMode};
use lora_isac_core::selftest::run_selftest;
use lora_isac_core::{export, Error};

#[derive(Parser)]
#[command(
    name = "lora-isac",
    version,
    about = "LoRa integrated sensing and communication simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Soil-moisture sweep from a dual-antenna node.
    Soil(RunArgs),
    /// Walking/still episodes through a two-antenna gateway.
    Presence(RunArgs),
    /// Multi-node channel and slot simulation.
    Network(RunArgs),
    /// Invariant checks across all modules.
    Selftest {
        /// Also write selftest.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; overrides the scenario's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run_scenario(mode: ScenarioMode, args: &RunArgs) -> Result<PathBuf, Error> {
    let mut scenario = ScenarioFile::load(&args.scenario)?;
    if scenario.mode != mode {
        return Err(Error::Config(format!(
            "{}: scenario mode is `{}`, expected `{}`",
            args.scenario.display(),
            scenario.mode.name(),
            mode.name()
        )));
    }
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let artifacts = scenario.run()?;
    artifacts.write_to(&out)?;
    for (name, _) in &artifacts.files {
        println!("wrote {}", out.join(name).display());
    }
    Ok(out)
}

fn selftest(out: Option<&Path>) -> anyhow::Result<bool> {
    let report = run_selftest();
    for c in &report.checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        export::write_json(&dir.join("selftest.json"), &report)?;
    }
    Ok(report.all_passed)
}

fn diagnostic(kind: &str, message: &str) {
    eprintln!("lora-isac: error[{kind}]: {}", message.replace('\n', " "));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.command {
        Command::Soil(a) => (ScenarioMode::Soil, a),
        Command::Presence(a) => (ScenarioMode::Presence, a),
        Command::Network(a) => (ScenarioMode::Network, a),
        Command::Selftest { out } => {
            return match selftest(out.as_deref()) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => {
                    diagnostic("selftest", "one or more properties failed");
                    ExitCode::FAILURE
                }
                Err(e) => {
                    diagnostic("io", &format!("{e:#}"));
                    ExitCode::FAILURE
                }
            };
        }
    };
    match run_scenario(mode, args) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            diagnostic(e.kind(), &e.to_string());
            ExitCode::from(match e {
                Error::Config(_) | Error::Json(_) => 2,
                _ => 1,
            })
        }
    }
}
