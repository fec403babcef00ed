use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slfv_harness::commands;
use slfv_harness::{ExperimentConfig, HarnessError};

#[derive(Parser, Debug)]
#[command(name = "slfv", version, about = "Spatial Lambda-Fleming-Viot identity-by-descent experiments")]
struct Cli {
    /// TOML config file (built-in defaults when omitted).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sim.t_end=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for replicates (default: all cores).
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run replicates and write the mean profile and identity tables.
    Simulate,
    /// Solve for the stationary profile and write the kernel prediction.
    Predict,
    /// Score a simulation against a prediction.
    Compare {
        /// Simulated identity table (default: <out_dir>/identity.csv).
        #[arg(long)]
        sim: Option<PathBuf>,
        /// Prediction table (default: <out_dir>/prediction.csv).
        #[arg(long)]
        prediction: Option<PathBuf>,
    },
    /// Operator convergence, generator checks and the bracket diagnostic.
    Diagnostics,
    /// Solve for the stationary profile only.
    SteadyState,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Simulate => {
            let r = commands::simulate(&cfg, cli.threads)?;
            println!(
                "replicates={} candidates={} accepted={} evictions={}",
                cfg.analysis.replicates, r.counts.candidates, r.counts.accepted, r.counts.evictions
            );
            print_files(&r.files);
        }
        Command::Predict => {
            let r = commands::predict(&cfg)?;
            if !r.steady.converged {
                eprintln!("warning: steady state not converged (residual {})", r.steady.residual);
            }
            print_files(&r.files);
        }
        Command::Compare { sim, prediction } => {
            let r = commands::compare(&cfg, sim.as_deref(), prediction.as_deref())?;
            match r.coverage {
                Some(c) => println!("coverage={c:.4} ({}/{})", r.covered, r.considered),
                None => println!("coverage=NA"),
            }
            match r.best_n {
                Some(n) => println!("best_n={n:.4} configured_n={}", r.configured_n),
                None => println!("best_n=NA configured_n={}", r.configured_n),
            }
            for d in &r.ratios {
                println!(
                    "ratio I({0},{1})/I({0},{2}): simulated={3:.4} predicted={4:.4}",
                    d.ref_site, d.far, d.near, d.simulated, d.predicted
                );
            }
            print_files(&r.files);
        }
        Command::Diagnostics => {
            let r = commands::diagnostics(&cfg, cli.threads)?;
            println!("jump_convergence_slope={:.4}", r.convergence.slope);
            println!("generator_refinement_slope={:.4}", r.refinement.slope);
            println!("generator_formula_residual={:e}", r.generator_residual);
            println!("flat_generator_residual={:e}", r.flat_residual);
            println!("qv_ratio={:.4}", r.qv.ratio);
            println!("qv_u_slope={:.4}", r.qv_scaling.slope);
            print_files(&r.files);
        }
        Command::SteadyState => {
            let r = commands::steady(&cfg)?;
            println!(
                "converged={} residual={:e} steps={}",
                r.steady.converged, r.steady.residual, r.steady.steps
            );
            print_files(&r.files);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
