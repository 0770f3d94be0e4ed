use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use meta_attack_lab::config::ExperimentConfig;
use meta_attack_lab::run::{self, AttackOptions};
use meta_attack_lab::{format_check, gradcheck, parse_op, report, GRADCHECK_SEED};

#[derive(Parser)]
#[command(name = "meta-attack", version, about = "Poisoning attacks on few-shot meta-learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the configured learner and write a checkpoint.
    Metatrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the attack grid against a checkpoint.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Episodes evaluated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a results CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable op and of the
    /// attack gradient through unrolled adaptation.
    Gradcheck {
        #[arg(long, default_value_t = GRADCHECK_SEED)]
        seed: u64,
        /// Corrupt this op's backward pass (for testing the checks).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Metatrain { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let trained = run::metatrain(&cfg, &dir)?;
            if let Some(last) = trained.training.epochs.last() {
                println!(
                    "epoch {}: mean query loss {:.4}, held-out accuracy {}",
                    last.epoch,
                    last.mean_loss,
                    last.held_out_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            println!("checkpoint {}", trained.checkpoint.display());
            println!("curve      {}", trained.curve.display());
        }
        Command::Attack {
            config,
            checkpoint,
            out,
            jobs,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let options = AttackOptions { jobs, stop_after: None };
            let record = run::attack(&cfg, &checkpoint, &dir, &options)
                .with_context(|| format!("attack run {}", cfg.name))?;
            println!(
                "run {}: {} episodes ({} resumed), {} rows -> {}",
                record.run_id,
                record.episodes,
                record.resumed_episodes,
                record.rows,
                dir.join(run::RESULTS_FILE).display()
            );
        }
        Command::Report { input, out } => {
            let r = report::report(&input, &out)?;
            print!("{}", report::format_summary(&r.summary));
            println!("summary {}", r.summary_path.display());
            println!("series  {}", r.budget_path.display());
        }
        Command::Gradcheck { seed, fault } => {
            let fault = match fault {
                None => None,
                Some(name) => match parse_op(&name) {
                    Some(op) => Some(op),
                    None => bail!("unknown op `{name}`"),
                },
            };
            let reports = gradcheck(seed, fault)?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            for r in &reports {
                println!("{}", format_check(r));
            }
            println!("{} checks, {} failed", reports.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
