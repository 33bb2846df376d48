use std::path::PathBuf;
use std::process::ExitCode;

use auv_mppi_cli::{plots, run_experiment, CliError, ExperimentKind, ExperimentSpec, VERSION};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "auv-mppi", version = VERSION, about = "Run MPPI underwater-vehicle experiments")]
struct Cli {
    /// Rollout worker threads; defaults to one per core.
    #[arg(long, global = true, env = auv_mppi_cli::WORKERS_ENV)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        /// sweep-K, sweep-horizon, sweep-sigma, filter-study, timing,
        /// pid-compare, obstacle-course or single-run
        #[arg(long)]
        experiment: ExperimentKind,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a scenario key, e.g. `--set mppi.num_samples=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write plot data when the run finishes.
        #[arg(long)]
        plots: bool,
    },
    /// Write plot data for a finished experiment directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers.filter(|n| *n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            experiment,
            scenario,
            out,
            overrides,
            seed,
            plots: with_plots,
        } => {
            let spec = ExperimentSpec {
                kind: experiment,
                scenario,
                overrides,
                out: out.clone(),
                seed,
            };
            let outcome = run_experiment(&spec)?;
            let manifest = &outcome.manifest;
            print!("{}", outcome.table());
            println!(
                "{}: {} runs finished, results in {}",
                manifest.experiment,
                manifest.runs_finished,
                out.display()
            );
            if with_plots {
                let files = plots::emit_plots(&out)?;
                println!("wrote {} plot files", files.len());
            }
            Ok(())
        }
        Command::Plot { dir } => {
            let files = plots::emit_plots(&dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}
