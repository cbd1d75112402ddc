use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use roughcalc::diagnostics::scenario::{exit_code, run_scenario, RunOptions, BUILD, SCENARIOS};
use roughcalc::diagnostics::suites::load_sample_dir;
use roughcalc::diagnostics::{convergence_rate, kolmogorov_scaling_fit, read_rate_table};

/// Scenario runner and diagnostics for rough stochastic calculus identities.
#[derive(Debug, Parser)]
#[command(name = "roughcalc", version = BUILD)]
struct Cli {
    /// Override the master seed of the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replica parallelism (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario config and write `<out>/<name>.json` and CSV tables.
    Run { config: PathBuf },
    /// Fit the log-log convergence rate of a `mesh,median` (or `mesh,residual`) CSV.
    FitRate { csv: PathBuf },
    /// Fit the moment-scaling exponent of stored samples.
    Kolmogorov {
        samples_dir: PathBuf,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        q: f64,
    },
    /// List the registered scenarios.
    ListScenarios,
}

fn fit_rate(csv: &Path) -> anyhow::Result<()> {
    let file = std::fs::File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let fit = convergence_rate(&read_rate_table(file)?)?;
    println!("{}", serde_json::to_string_pretty(&fit)?);
    Ok(())
}

fn kolmogorov(dir: &Path, level: usize, q: f64) -> anyhow::Result<()> {
    let samples = load_sample_dir(dir).with_context(|| format!("loading samples from {}", dir.display()))?;
    let fit = kolmogorov_scaling_fit(&samples, level, q)?;
    println!("{}", serde_json::to_string_pretty(&fit)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match &cli.command {
        Command::Run { config } => {
            let res = run_scenario(config, &RunOptions { seed: cli.seed, out: cli.out.clone() });
            match &res {
                Ok(s) => {
                    println!("{} {}", s.name, if s.pass { "PASS" } else { "FAIL" });
                    for f in &s.files {
                        println!("  {}", f.display());
                    }
                }
                Err(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&res) as u8)
        }
        Command::FitRate { csv } => report(fit_rate(csv)),
        Command::Kolmogorov { samples_dir, level, q } => report(kolmogorov(samples_dir, *level, *q)),
        Command::ListScenarios => {
            for (name, about) in SCENARIOS {
                println!("{name:<20} {about}");
            }
            ExitCode::SUCCESS
        }
    }
}

fn report(r: anyhow::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
