//! Pipeline runner.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use panelsynth::dgp::DgpConfig;
use panelsynth::pipeline::{run_pipeline, write_simulation, PipelineConfig, Stage};
use panelsynth::Error;

#[derive(Parser)]
#[command(
    name = "panelsynth",
    about = "Conditional generative augmentation and matched event-study estimation for sparse panels",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the stage chain declared in a pipeline config.
    Run {
        /// Pipeline config (TOML).
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the stage chain, comma-separated
        /// (e.g. "ingest,match,estimate").
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Validate a pipeline config without running it.
    Validate {
        /// Pipeline config (TOML).
        config: PathBuf,
    },
    /// Simulate a ground-truth panel and write panel.csv,
    /// ground_truth.json and schema.toml.
    Simulate {
        /// Simulator config (TOML); omitted keys take defaults.
        config: PathBuf,
        /// Override the simulator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: alongside the config).
        #[arg(long, default_value = "sim_out")]
        out: PathBuf,
    },
}

fn apply_overrides(
    mut config: PipelineConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
    stages: Option<Vec<String>>,
) -> Result<PipelineConfig, Error> {
    if let Some(seed) = seed {
        config.root_seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    if let Some(stages) = stages {
        config.stages = stages
            .iter()
            .map(|s| s.trim().parse::<Stage>())
            .collect::<Result<Vec<_>, _>>()?;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            stages,
        } => {
            let config = apply_overrides(PipelineConfig::load(&config)?, seed, out, stages)?;
            let outcome = run_pipeline(&config)?;
            println!(
                "completed stages: {}",
                outcome
                    .completed
                    .iter()
                    .map(|s| s.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            for entry in &outcome.manifest.entries {
                println!("  {}  {}  [{}]", entry.sha256, entry.file, entry.stage);
            }
            println!("manifest: {}/manifest.json", outcome.output_dir.display());
            Ok(())
        }
        Command::Validate { config } => {
            PipelineConfig::load(&config)?.validate()?;
            println!("config ok");
            Ok(())
        }
        Command::Simulate { config, seed, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut dgp: DgpConfig =
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(seed) = seed {
                dgp.seed = seed;
            }
            let files = write_simulation(&dgp, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
