use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ismoe_cli::commands::{
    announce, cmd_ablate, cmd_baseline_gp, cmd_fit_predict, cmd_generate, cmd_sweep,
};
use ismoe_cli::{AblationMode, CliError, GeneratorKind, RunConfig};

/// Scalable Gaussian process regression with an importance sampled
/// mixture of experts.
///
/// Every command reads an optional flat TOML config (`--config`) and then
/// applies trailing `--key value` overrides, e.g. `--j 20 --sa-enabled false`.
#[derive(Parser)]
#[command(name = "ismoe", version)]
struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/test CSVs and a metadata sidecar to `out_dir`.
    Generate {
        kind: GeneratorKind,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Fit IS-MOE on `train` and predict `test`.
    FitPredict {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Exact GP with optimized hyperparameters, same outputs as fit-predict.
    BaselineGp {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Grid over `sweep_j` x `sweep_k` x `sweep_b` x `n_repeats`.
    Sweep {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// IS-MOE with one weighting or partitioning variant.
    Ablate {
        mode: AblationMode,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Generate { kind, overrides } => {
            let config = RunConfig::load(config_path, &overrides)?;
            let paths = cmd_generate(kind, &config)?;
            announce(&paths.iter().map(|p| p.as_path()).collect::<Vec<_>>());
        }
        Command::FitPredict { overrides } => {
            let config = RunConfig::load(config_path, &overrides)?;
            let r = cmd_fit_predict(&config)?;
            println!("test log likelihood {:.4}, mse {:.6}, ess {:.2}", r.eval.test_log_likelihood, r.eval.mse, r.eval.ess);
            announce(&[&config.predictions, &config.report]);
        }
        Command::BaselineGp { overrides } => {
            let config = RunConfig::load(config_path, &overrides)?;
            let r = cmd_baseline_gp(&config)?;
            println!("test log likelihood {:.4}, mse {:.6}", r.eval.test_log_likelihood, r.eval.mse);
            announce(&[&config.predictions, &config.report]);
        }
        Command::Sweep { overrides } => {
            let config = RunConfig::load(config_path, &overrides)?;
            let rows = cmd_sweep(&config)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} runs, {failed} failed", rows.len());
            announce(&[&config.sweep_output]);
        }
        Command::Ablate { mode, overrides } => {
            let config = RunConfig::load(config_path, &overrides)?;
            let r = cmd_ablate(mode, &config)?;
            println!("test log likelihood {:.4}, mse {:.6}, ess {:.2}", r.eval.test_log_likelihood, r.eval.mse, r.eval.ess);
            announce(&[&config.predictions, &config.report]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
