//! linest: simulate micro-PMU series on a synthetic feeder and estimate its
//! line parameters with the two-stage covariance + Broyden method.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use linest_core::harness::{emit_outputs, run_experiment, ExperimentConfig};
use linest_core::network::{
    assemble_bus_admittance, invert_branch_impedance, load_network, DEFAULT_COND_BOUND,
};
use linest_core::sim::{
    add_measurement_noise, read_series_csv, simulate, solve_equilibrium, write_series_csv,
    LoadDynamics, NoiseSpec, SimOptions,
};
use linest_core::stage2::{run_pipeline, write_estimates, Aggregation, PipelineOptions};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "linest", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement series from a feeder and its load dynamics.
    Simulate(SimulateArgs),
    /// Estimate line parameters from a feeder and a measurement CSV.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo evaluation experiment from a config document.
    Evaluate(EvaluateArgs),
    /// Feeder file utilities.
    Feeder(FeederArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Feeder document (JSON).
    #[arg(long)]
    feeder: PathBuf,
    /// Load dynamics document (JSON).
    #[arg(long)]
    dynamics: PathBuf,
    /// Output measurement CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3600)]
    samples: usize,
    /// Sample interval in seconds.
    #[arg(long, default_value_t = 0.04)]
    dt: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Measurement noise std (pu on V, rad on angles); 0 keeps the series clean.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Integration sub-steps per sample.
    #[arg(long, default_value_t = 10)]
    substeps: usize,
}

#[derive(Args)]
struct EstimateArgs {
    /// Feeder document: provides connectivity (and the reference parameters).
    #[arg(long)]
    feeder: PathBuf,
    /// Measurement CSV written by `simulate`.
    #[arg(long)]
    measurements: PathBuf,
    /// Load dynamics document (declares which bus-phases are dynamic).
    #[arg(long)]
    dynamics: PathBuf,
    /// Output estimate CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Covariance lag in samples.
    #[arg(long, default_value_t = 1)]
    lag: usize,
    /// Snapshots stacked by the refinement stage.
    #[arg(long, default_value_t = 8)]
    snapshots: usize,
    /// Omit the true parameter columns from the output.
    #[arg(long)]
    no_truth: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment config document (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (1 forces sequential execution).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FeederArgs {
    #[command(subcommand)]
    command: FeederCommand,
}

#[derive(Subcommand)]
enum FeederCommand {
    /// Check a feeder document against the schema and model invariants.
    Validate {
        #[arg(long)]
        feeder: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: e.to_string(),
    }
}

fn numerical_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_NUMERICAL,
        message: e.to_string(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            if args.samples < 2 || args.dt <= 0.0 {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: "need --samples >= 2 and --dt > 0".into(),
                });
            }
            let net = load_network(&args.feeder).map_err(data_err)?;
            let dynamics = LoadDynamics::load(&net, &args.dynamics).map_err(data_err)?;
            let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).map_err(data_err)?;
            let op = solve_equilibrium(&adm, &dynamics).map_err(numerical_err)?;
            let series = simulate(
                &adm,
                &dynamics,
                &op,
                args.dt,
                args.samples,
                args.seed,
                &SimOptions {
                    substeps: args.substeps,
                },
            )
            .map_err(numerical_err)?;
            let series = if args.noise > 0.0 {
                let spec = NoiseSpec::from_level(args.noise).map_err(data_err)?;
                add_measurement_noise(&series, &spec, args.seed.wrapping_add(1))
            } else {
                series
            };
            write_series_csv(&series, &args.out).map_err(data_err)?;
            println!(
                "wrote {} samples x {} bus-phases to {}",
                series.samples(),
                series.bus_phases(),
                args.out.display()
            );
            Ok(())
        }
        Command::Estimate(args) => {
            let net = load_network(&args.feeder).map_err(data_err)?;
            let dynamics = LoadDynamics::load(&net, &args.dynamics).map_err(data_err)?;
            let adm = assemble_bus_admittance(&net, DEFAULT_COND_BOUND).map_err(data_err)?;
            let series = read_series_csv(&args.measurements).map_err(data_err)?;
            let options = PipelineOptions {
                lag: args.lag,
                aggregation: Aggregation::Snapshots(args.snapshots),
                ..PipelineOptions::default()
            };
            let output =
                run_pipeline(&net, &adm, &dynamics, &series, &options).map_err(numerical_err)?;
            let truth = if args.no_truth {
                None
            } else {
                Some(
                    net.branches
                        .iter()
                        .map(|b| invert_branch_impedance(b, DEFAULT_COND_BOUND))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(numerical_err)?,
                )
            };
            write_estimates(&args.out, &net, &output, truth.as_deref()).map_err(data_err)?;
            println!(
                "estimated {} parameter pairs (refinement {} after {} iterations, mismatch {:.3e})",
                output.params.pair_count(),
                if output.refined.converged {
                    "converged"
                } else {
                    "did not converge"
                },
                output.refined.iterations,
                output.refined.final_norm,
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let mut config = ExperimentConfig::load(&args.config).map_err(data_err)?;
            if let Some(w) = args.workers {
                config.workers = Some(w);
            }
            if let Some(r) = args.replicates {
                config.replicates = r;
            }
            if let Some(s) = args.seed {
                config.master_seed = s;
            }
            let out_dir = args.out.unwrap_or_else(|| config.output_dir.clone());
            let report = run_experiment(&config).map_err(numerical_err)?;
            emit_outputs(&report, &config, &out_dir, args.force).map_err(data_err)?;
            let total_failures: usize = report.levels.iter().map(|l| l.failures).sum();
            println!(
                "evaluated {} noise levels x {} replicates in {:.2}s ({} failures) -> {}",
                config.noise_levels.len(),
                config.replicates,
                report.total_wall_seconds,
                total_failures,
                out_dir.display()
            );
            for level in &report.levels {
                if let (Some(b1), Some(b2)) = (level.stage1_b, level.stage2_b) {
                    println!(
                        "  noise {:>8.1e}: median MAPE(B) initial {:>8.3}% refined {:>10.5}%",
                        level.noise, b1.median, b2.median
                    );
                }
            }
            Ok(())
        }
        Command::Feeder(args) => match args.command {
            FeederCommand::Validate { feeder } => {
                let net = load_network(&feeder).map_err(data_err)?;
                assemble_bus_admittance(&net, DEFAULT_COND_BOUND).map_err(data_err)?;
                println!(
                    "ok: {} buses, {} branches, slack bus {}",
                    net.buses.len(),
                    net.branches.len(),
                    net.buses[net.slack_index()].id
                );
                Ok(())
            }
        },
    }
}
