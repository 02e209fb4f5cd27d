use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ssrobust::experiment::motivate::{format_table, motivate_table, DEFAULT_DELTAS};
use ssrobust::experiment::run::table_text;
use ssrobust::experiment::{cmd_run, cmd_sweep, exit, exit_code, run_verify, ExperimentConfig, Overrides, RunSummary, Suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "ssrobust", version, about = "Single-source robustness experiments for fusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check closed forms against numeric oracles and gradients against finite differences.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Perturb the closed forms; the suites must then fail.
        #[arg(long)]
        mutate: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train and evaluate `train.algorithm` for every seed.
    Run(RunArgs),
    /// Train and evaluate every algorithm in `algorithms` for every seed.
    Sweep(RunArgs),
    /// Print the unbalanced-robustness table.
    Motivate {
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Overrides {
            seeds: self.seeds.clone(),
            output: self.out.clone(),
            trials: self.trials,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

fn report_run(summary: &RunSummary, cfg: &ExperimentConfig) -> i32 {
    print!("{}", table_text(&summary.table, &cfg.model.fusion.to_string()));
    println!("results written to {}", cfg.output.display());
    for r in &summary.results {
        if r.report().is_none() {
            eprintln!("{} seed {}: training diverged, see {}", r.algorithm, r.seed, r.dir.join("FAILED").display());
        }
    }
    if summary.diverged() {
        exit::DIVERGED
    } else {
        exit::SUCCESS
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify { suite, mutate, seed } => {
            let report = run_verify(suite, &VerifyOptions { seed, mutate, ..VerifyOptions::default() })?;
            print!("{}", report.to_text());
            Ok(if report.passed() { exit::SUCCESS } else { exit::VERIFY_FAILED })
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let summary = cmd_run(&cfg).context("run failed")?;
            Ok(report_run(&summary, &cfg))
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let summary = cmd_sweep(&cfg).context("sweep failed")?;
            Ok(report_run(&summary, &cfg))
        }
        Command::Motivate { sigma, deltas } => {
            let deltas = deltas.unwrap_or_else(|| DEFAULT_DELTAS.to_vec());
            print!("{}", format_table(&motivate_table(&deltas, sigma), sigma));
            Ok(exit::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.downcast_ref::<ssrobust::Error>().map_or(exit::OTHER, exit_code)
        }
    };
    ExitCode::from(code as u8)
}
