//! Command-line harness: run scenarios, validate them, compare against the
//! pinned-ECMP baseline, and re-derive summaries from CSV output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p4green::engine::{run_scenario, run_scenario_until};
use p4green::metrics::{compare_text, summary_text, write_report, RunMode, SummarySource};
use p4green::scenario::{Scenario, ScenarioError};
use p4green::time::SimTime;

const EXIT_IO: u8 = 3;
const EXIT_INVALID: u8 = 4;
const EXIT_MISMATCH: u8 = 5;

#[derive(Parser)]
#[command(
    name = "p4green",
    about = "Data center simulator: in-network traffic consolidation and green load balancing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its summary.
    Run {
        scenario: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop at this simulated time instead of the scenario default.
        #[arg(long)]
        until_secs: Option<f64>,
        /// Write CSV time series and summary.txt into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Run a scenario twice (consolidating and pinned-ECMP baseline) and
    /// print the aggregation-switch operation-time reduction.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write both runs' CSVs under <out>/p4green and <out>/baseline.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive the summary from a run's CSV directory and verify it
    /// against the stored summary.txt.
    Report { dir: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, u8> {
    match Scenario::load(path) {
        Ok(mut sc) => {
            if let Some(s) = seed {
                sc.seed = s;
            }
            Ok(sc)
        }
        Err(ScenarioError::Io { path, source }) => {
            eprintln!("error: cannot read {path}: {source}");
            Err(EXIT_IO)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Err(EXIT_INVALID)
        }
    }
}

fn run_main() -> Result<(), u8> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            until_secs,
            out,
        } => {
            let sc = load(&scenario, seed)?;
            let report = match until_secs {
                Some(s) => {
                    if !(s.is_finite() && s > 0.0) {
                        eprintln!("error: --until-secs must be positive");
                        return Err(EXIT_INVALID);
                    }
                    run_scenario_until(&sc, RunMode::P4Green, SimTime((s * 1e9).round() as u64))
                }
                None => run_scenario(&sc, RunMode::P4Green),
            };
            if let Some(dir) = out {
                write_report(&dir, &report).map_err(|e| {
                    eprintln!("error: cannot write {}: {e}", dir.display());
                    EXIT_IO
                })?;
            }
            print!("{}", summary_text(&SummarySource::from_report(&report)));
            Ok(())
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario, None)?;
            println!(
                "ok: {} ({} switches, {} hosts, seed {})",
                sc.name,
                sc.switches.len(),
                sc.hosts.len(),
                sc.seed
            );
            Ok(())
        }
        Command::Compare {
            scenario,
            seed,
            out,
        } => {
            let sc = load(&scenario, seed)?;
            let p4 = run_scenario(&sc, RunMode::P4Green);
            let baseline = run_scenario(&sc, RunMode::PinnedEcmp);
            if let Some(dir) = &out {
                for (sub, report) in [("p4green", &p4), ("baseline", &baseline)] {
                    write_report(&dir.join(sub), report).map_err(|e| {
                        eprintln!("error: cannot write {}: {e}", dir.display());
                        EXIT_IO
                    })?;
                }
                std::fs::write(dir.join("compare.txt"), compare_text(&p4, &baseline)).map_err(
                    |e| {
                        eprintln!("error: cannot write compare.txt: {e}");
                        EXIT_IO
                    },
                )?;
            }
            print!("{}", compare_text(&p4, &baseline));
            Ok(())
        }
        Command::Report { dir } => {
            let source = SummarySource::from_dir(&dir).map_err(|e| {
                eprintln!("error: cannot read CSVs in {}: {e}", dir.display());
                EXIT_IO
            })?;
            let derived = summary_text(&source);
            let stored_path = dir.join("summary.txt");
            match std::fs::read_to_string(&stored_path) {
                Ok(stored) if stored == derived => {
                    print!("{derived}");
                    Ok(())
                }
                Ok(_) => {
                    eprintln!(
                        "error: summary.txt in {} does not match the figures derived from its CSVs",
                        dir.display()
                    );
                    Err(EXIT_MISMATCH)
                }
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", stored_path.display());
                    Err(EXIT_IO)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    match run_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
