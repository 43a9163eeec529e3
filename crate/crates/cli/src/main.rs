use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use stochopt::scenario::{load_scenario, run_scenario, Overrides};

#[derive(Debug, Parser)]
#[command(name = "stochopt", version, about = "Numerical verification of stochastic optimality conditions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the checks of a scenario file and write the summary and traces.
    ///
    /// Exit status: 0 all checks pass, 2 some check violated, 3 some check
    /// inconclusive, 1 on invalid input or execution error.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the summary and CSV.
        #[arg(long, env = "STOCHOPT_OUT_DIR", default_value = ".")]
        out: PathBuf,
        /// Worker threads (0 = rayon default). Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
}

fn verify(config: PathBuf, overrides: Overrides, out: PathBuf, threads: usize) -> anyhow::Result<i32> {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;

    let mut cfg = load_scenario(&config).with_context(|| format!("loading {}", config.display()))?;
    cfg.apply_overrides(&overrides)?;
    let outcome = run_scenario(&cfg, &out)?;
    for r in &outcome.reports {
        let value = r.value.map(|e| e.mean).or(r.stats.map(|s| s.max)).unwrap_or(f64::NAN);
        let stderr = r.value.map(|e| e.stderr).unwrap_or(f64::NAN);
        println!("{:<32} {:<13} value {:>12.5e}  stderr {:>11.4e}", r.id, r.verdict.as_str(), value, stderr);
    }
    println!("summary: {}", outcome.summary_path.display());
    println!("traces:  {}", outcome.csv_path.display());
    Ok(outcome.exit_status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify {
            config,
            paths,
            steps,
            seed,
            out,
            threads,
        } => verify(config, Overrides { paths, steps, seed }, out, threads),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
