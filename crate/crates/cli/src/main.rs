//! `srppo` command line: run an experiment from a TOML config, regenerate
//! the report of a run directory, compare runs, or validate a config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use srppo::experiment::{compare, report, run, ExperimentConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "srppo", version, about = "PPO with a coherent log-ratio reward on synthetic token worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every configured stage and write a run directory.
    Run {
        /// Experiment config; defaults are used for absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Global seed, overriding `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated stages, overriding `stages`.
        #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
        stages: Option<Vec<Stage>>,
    },
    /// Regenerate `report/` from the logs of a run directory.
    Report { dir: PathBuf },
    /// Merge the evaluation tables of runs over the same world.
    Compare {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Print the config with every default filled in.
        #[arg(long)]
        print: bool,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).map_err(|e| e.to_string())
}

fn load(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            stages,
        } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(stages) = stages {
                cfg.stages = stages;
            }
            let summary = run(&cfg)?;
            let files = report(&summary.dir)?;
            println!(
                "{}: {} stages completed in {}",
                cfg.name,
                summary.manifest.completed.len(),
                summary.dir.display()
            );
            let methods = summary.dir.join("eval/summary.csv");
            if methods.exists() {
                print!("{}", std::fs::read_to_string(&methods)?);
            }
            println!("report: {}", files.summary.display());
        }
        Command::Report { dir } => {
            let files = report(&dir)?;
            println!("{}", files.summary.display());
            for p in &files.plots {
                println!("{}", p.display());
            }
        }
        Command::Compare { dirs, out } => {
            let table = compare(&dirs)?;
            let csv = table.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Validate { config, print } => {
            let cfg = load(Some(&config))?;
            if let Err(e) = cfg.validate() {
                bail!("{}: {e}", config.display());
            }
            if print {
                print!("{}", cfg.to_toml()?);
            } else {
                println!("{}: ok", config.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
