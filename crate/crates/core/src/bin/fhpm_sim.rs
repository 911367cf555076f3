//! Command-line front end: run experiments from JSON configs, validate
//! configs, list the registry, and export traces.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fhpm_sim::harness::{experiment_names, run_experiment, ExperimentConfig};
use fhpm_sim::workload::{generate_trace, write_trace, TraceSpec};

#[derive(Parser)]
#[command(name = "fhpm-sim", version, about = "Deterministic huge-page management simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and write its report files.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the registered experiment names.
    ListExperiments,
    /// Generate a binary trace file from a trace-spec JSON.
    GenTrace { spec: PathBuf, out: PathBuf },
    /// Check a config file and print "ok".
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut config = ExperimentConfig::from_path(&config).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(out) = out {
                config.out_dir = Some(out);
            }
            let resolved = config.resolve().map_err(|e| e.to_string())?;
            let out_dir = resolved.out_dir.clone();
            let outputs = run_experiment(&resolved, &out_dir).map_err(|e| e.to_string())?;
            for file in outputs.files {
                println!("{}", file.display());
            }
            Ok(())
        }
        Command::ListExperiments => {
            for name in experiment_names() {
                println!("{name}");
            }
            Ok(())
        }
        Command::GenTrace { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| format!("cannot read {}: {e}", spec.display()))?;
            let spec: TraceSpec = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let trace = generate_trace(&spec).map_err(|e| e.to_string())?;
            let file = std::fs::File::create(&out)
                .map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            write_trace(std::io::BufWriter::new(file), &trace).map_err(|e| e.to_string())?;
            println!("{} events -> {}", trace.events.len(), out.display());
            Ok(())
        }
        Command::Validate { config } => {
            let config = ExperimentConfig::from_path(&config).map_err(|e| e.to_string())?;
            config.resolve().map_err(|e| e.to_string())?;
            println!("ok");
            Ok(())
        }
    }
}
