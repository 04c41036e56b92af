use clap::{Parser, Subcommand};
use tiltwise::commands::{
    self, AnalyzeArgs, BoundsArgs, CoverageArgs, DoseArgs, DoseKind, RateArgs, RemainderArgs,
};

/// Cross-fitted estimation of mean outcomes under exponential tilts of a
/// continuous treatment density.
#[derive(Parser)]
#[command(name = "tiltwise", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the incremental-effect curve from a CSV file.
    Analyze(AnalyzeArgs),
    /// Run a simulation-laboratory experiment with pass/fail checks.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Dose-response estimation via large tilts.
    #[command(subcommand)]
    Dose(DoseCommand),
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// RMSE scaling in the tilt and the sample size.
    Rate(RateArgs),
    /// Wald-interval coverage of the oracle truth.
    Coverage(CoverageArgs),
    /// Sandwich the efficiency bound between its closed-form envelopes.
    Bounds(BoundsArgs),
    /// Second-order scaling of the von Mises remainder.
    Remainder(RemainderArgs),
}

#[derive(Subcommand)]
enum DoseCommand {
    /// Estimate the mean outcome at the upper support edge.
    EdgeUpper(DoseArgs),
    /// Estimate the mean outcome at the lower support edge.
    EdgeLower(DoseArgs),
    /// Estimate the dose-response at an interior point (--at).
    Point(DoseArgs),
}

fn configure_threads() {
    if let Ok(value) = std::env::var("TILTWISE_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads > 0 {
                // ignore failure if a pool already exists
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    configure_threads();
    match cli.command {
        Command::Analyze(args) => commands::analyze(&args),
        Command::Simulate(SimulateCommand::Rate(args)) => commands::simulate_rate(&args),
        Command::Simulate(SimulateCommand::Coverage(args)) => commands::simulate_coverage(&args),
        Command::Simulate(SimulateCommand::Bounds(args)) => commands::simulate_bounds(&args),
        Command::Simulate(SimulateCommand::Remainder(args)) => {
            commands::simulate_remainder(&args)
        }
        Command::Dose(DoseCommand::EdgeUpper(args)) => commands::dose(DoseKind::EdgeUpper, &args),
        Command::Dose(DoseCommand::EdgeLower(args)) => commands::dose(DoseKind::EdgeLower, &args),
        Command::Dose(DoseCommand::Point(args)) => commands::dose(DoseKind::Point, &args),
    }
}

fn main() -> std::process::ExitCode {
    match run() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            // single-line machine-readable error
            let line = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{line}");
            std::process::ExitCode::FAILURE
        }
    }
}
