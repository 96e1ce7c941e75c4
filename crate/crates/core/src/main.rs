//! Command-line runner for closed-loop scenarios.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tiltwheel::allocation::build_allocation;
use tiltwheel::harness::{compute_metrics, run_scenario, RunLogs, ScenarioConfig};
use tiltwheel::vehicle::VehicleParams;

#[derive(Parser)]
#[command(name = "tiltwheel", about = "Tilt-rotor air/ground vehicle simulation and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print its metrics.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Override the RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for CSV logs and the metrics report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable all sensor noise.
        #[arg(long)]
        no_noise: bool,
        /// Feed the controller the true external wrench instead of the
        /// estimate.
        #[arg(long)]
        no_estimator: bool,
        /// Real-time-iteration mode: one SQP iteration per control tick.
        #[arg(long)]
        rti: bool,
    },
    /// Run every scenario file in a directory.
    Sweep {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute metrics from a log directory written by `run --out`.
    Metrics {
        /// Directory containing sim_log.csv and ctrl_log.csv.
        logs: PathBuf,
        /// Vehicle file used for the run (defaults to the built-in vehicle).
        #[arg(long)]
        vehicle: Option<PathBuf>,
    },
    /// Print the allocation matrix and its pseudoinverse as CSV.
    DumpAllocation {
        /// Vehicle TOML file (defaults to the built-in vehicle).
        #[arg(long)]
        vehicle: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), tiltwheel::Error> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            no_noise,
            no_estimator,
            rti,
        } => {
            let mut cfg = ScenarioConfig::from_toml_file(&scenario)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if no_noise {
                cfg.noise.enabled = false;
            }
            if no_estimator {
                cfg.estimator.enabled = false;
            }
            if rti {
                cfg.nmpc.rti = true;
            }
            run_one(&cfg, out.as_deref())
        }
        Command::Sweep { dir, out, seed } => {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(tiltwheel::Error::Config(format!(
                    "no scenario files in {}",
                    dir.display()
                )));
            }
            for path in entries {
                let mut cfg = ScenarioConfig::from_toml_file(&path)?;
                if let Some(seed) = seed {
                    cfg.seed = seed;
                }
                println!("=== {} ({})", cfg.name, path.display());
                let sub_out = out
                    .as_ref()
                    .map(|o| o.join(path.file_stem().unwrap_or_default()));
                run_one(&cfg, sub_out.as_deref())?;
            }
            Ok(())
        }
        Command::Metrics { logs, vehicle } => {
            let params = match vehicle {
                Some(path) => VehicleParams::from_toml_file(&path)?,
                None => VehicleParams::default(),
            };
            let logs = RunLogs::read_csv(&logs)?;
            let metrics = compute_metrics(&logs, &params)?;
            print!("{}", metrics.report());
            Ok(())
        }
        Command::DumpAllocation { vehicle } => {
            let params = match vehicle {
                Some(path) => VehicleParams::from_toml_file(&path)?,
                None => VehicleParams::default(),
            };
            let model = build_allocation(&params)?;
            println!("# allocation matrix A (6x8)");
            for r in 0..6 {
                let row: Vec<String> = (0..8).map(|c| format!("{:.12e}", model.a[(r, c)])).collect();
                println!("{}", row.join(","));
            }
            println!("# pseudoinverse A+ (8x6)");
            for r in 0..8 {
                let row: Vec<String> = (0..6).map(|c| format!("{:.12e}", model.a_pinv[(r, c)])).collect();
                println!("{}", row.join(","));
            }
            Ok(())
        }
    }
}

fn run_one(cfg: &ScenarioConfig, out: Option<&std::path::Path>) -> Result<(), tiltwheel::Error> {
    let output = run_scenario(cfg)?;
    print!("{}", output.metrics.report());
    if let Some(dir) = out {
        output.logs.write_csv(dir)?;
        std::fs::write(dir.join("metrics.txt"), output.metrics.report())?;
        println!("logs written to {}", dir.display());
    }
    if !output.metrics.completed {
        return Err(tiltwheel::Error::SimulationDiverged(
            output
                .metrics
                .failure
                .unwrap_or_else(|| "run aborted".into()),
        ));
    }
    Ok(())
}
