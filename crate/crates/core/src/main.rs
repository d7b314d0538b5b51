use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

use bmc_lab::experiment::{exit_code, run_experiment, ExperimentConfig, Subcommand, OUT_DIR_ENV};
use bmc_lab::BmcError;

/// Simulation and verification lab for bifurcating Markov chains.
#[derive(Debug, Parser)]
#[command(name = "bmc-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Simulate replicates and compare generation/tree moments to the oracle.
    Simulate(RunArgs),
    /// Evaluate exact moments through the many-to-one formulas.
    Oracle(RunArgs),
    /// Evaluate asymptotic variances with truncation certificates.
    Variance(RunArgs),
    /// Check the central limit theorem of the configured regime.
    Clt(RunArgs),
    /// Follow the martingale and ratios of the super-critical regime.
    Supercritical(RunArgs),
    /// Sweep the autoregression coefficient and label regimes.
    Regimes(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment file (TOML).
    #[arg(long = "config", value_name = "FILE")]
    config_flag: Option<PathBuf>,
    /// Experiment file (TOML), as a positional argument.
    #[arg(value_name = "CONFIG", conflicts_with = "config_flag")]
    config: Option<PathBuf>,
    /// Override the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; falls back to $BMC_LAB_OUT, the configuration,
    /// then `bmc-lab-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(subcommand: Subcommand, args: RunArgs) -> Result<bool, BmcError> {
    let path = args
        .config_flag
        .or(args.config)
        .ok_or_else(|| BmcError::Config("no configuration file given".into()))?;
    let config = ExperimentConfig::load(&path)?;
    let out_dir = args
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.output_dir().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bmc-lab-out"));

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = args.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool
        .build()
        .map_err(|e| BmcError::Config(format!("cannot start {:?} threads: {e}", args.threads)))?;

    let result = pool.install(|| run_experiment(subcommand, &config, args.seed));
    let output = match result {
        Ok(output) => output,
        Err(BmcError::BudgetExceeded { completed, requested }) => {
            std::fs::create_dir_all(&out_dir)?;
            let marker = out_dir.join(format!("{}.partial", subcommand.name()));
            std::fs::write(
                &marker,
                format!("runtime budget exceeded: {completed} of {requested} replicates completed\n"),
            )?;
            return Err(BmcError::BudgetExceeded { completed, requested });
        }
        Err(e) => return Err(e),
    };
    for path in output.write(&out_dir)? {
        println!("{}", path.display());
    }
    if !output.complete {
        return Err(BmcError::BudgetExceeded {
            completed: output.completed_replicates,
            requested: output.requested_replicates,
        });
    }
    Ok(output.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (subcommand, args) = match cli.command {
        Command::Simulate(a) => (Subcommand::Simulate, a),
        Command::Oracle(a) => (Subcommand::Oracle, a),
        Command::Variance(a) => (Subcommand::Variance, a),
        Command::Clt(a) => (Subcommand::Clt, a),
        Command::Supercritical(a) => (Subcommand::Supercritical, a),
        Command::Regimes(a) => (Subcommand::Regimes, a),
    };
    match run(subcommand, args) {
        Ok(all_passed) => {
            if !all_passed {
                eprintln!("note: some checks did not pass; see the `pass` column");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
