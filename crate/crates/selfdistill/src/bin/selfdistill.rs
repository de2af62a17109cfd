//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use selfdistill::corpus::{self, Corruption, TaskKind};
use selfdistill::runner::{
    emit_report, run_experiment, run_sweep, run_verification, ExperimentConfig, ReportFormat,
    RUN_ROOT_ENV,
};
use selfdistill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "selfdistill",
    about = "Desk-scale self-distillation laboratory for tiny autoregressive models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task dataset as JSONL.
    GenData {
        /// Task kind: reverse, modular_arith, expr_eval, tool_format.
        #[arg(long)]
        task: String,
        /// Number of examples.
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file path.
        #[arg(long)]
        out: PathBuf,
        /// Also attach corrupted negatives: answer_perturb, step_corrupt,
        /// lexical_swap.
        #[arg(long)]
        negatives: Option<String>,
    },
    /// Run one training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run root; defaults to $SELFDISTILL_RUN_ROOT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the trainer seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the experiment's eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a sweep specification (Cartesian grid x seeds).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate completed runs into a report file.
    Report {
        /// Run directories.
        runs: Vec<PathBuf>,
        /// table_csv or plotdata_json.
        #[arg(long, default_value = "table_csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle and gradient verification suite.
    Verify,
}

fn run_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { task, n, seed, out, negatives } => {
            let kind = TaskKind::from_str(&task)?;
            let mut ds = corpus::generate_task(kind, n, seed)?;
            if let Some(corruption) = negatives {
                let corruption = match corruption.as_str() {
                    "answer_perturb" => Corruption::AnswerPerturb,
                    "step_corrupt" => Corruption::StepCorrupt,
                    "lexical_swap" => Corruption::LexicalSwap,
                    other => return Err(Error::Config(format!("unknown corruption {other}"))),
                };
                corpus::populate_negatives(&mut ds, corruption, seed.wrapping_add(1))?;
            }
            std::fs::write(&out, ds.to_jsonl())?;
            println!("wrote {} examples to {}", n, out.display());
            Ok(())
        }
        Command::Train { config, out, seed } => {
            let out_dir = run_root(out);
            std::fs::create_dir_all(&out_dir)?;
            let (record, dir) = if let Some(seed) = seed {
                let mut cfg = ExperimentConfig::from_path(&config)?;
                cfg.trainer.seed = seed;
                selfdistill::runner::run_experiment_config(&cfg, &out_dir)?
            } else {
                run_experiment(&config, &out_dir)?
            };
            println!("run {} complete in {}", record.run_id, dir.display());
            if let Some(report) = record.final_report() {
                println!(
                    "accuracy {:.4}  fit_ppl {:.4}  retention_ppl {:.4}  mean_jsd {:.5}",
                    report.accuracy, report.fit_ppl, report.retention_ppl, report.mean_token_jsd
                );
            }
            Ok(())
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (report, _) = selfdistill::runner::eval_checkpoint(&cfg, &checkpoint)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Sweep { config, out } => {
            let out_dir = run_root(out);
            let index = run_sweep(&config, &out_dir)?;
            let ok = index.iter().filter(|c| c.status == "ok").count();
            println!("sweep finished: {ok}/{} cells ok", index.len());
            for cell in &index {
                if cell.status != "ok" {
                    eprintln!("cell {}: {}", cell.cell, cell.status);
                }
            }
            Ok(())
        }
        Command::Report { runs, format, out } => {
            if runs.is_empty() {
                return Err(Error::Config("no run directories given".into()));
            }
            let format = ReportFormat::from_str(&format)?;
            emit_report(&runs, format, &out)?;
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Verify => {
            let items = run_verification();
            let mut all_ok = true;
            for item in &items {
                println!(
                    "[{}] {} — {}",
                    if item.passed { "PASS" } else { "FAIL" },
                    item.name,
                    item.detail
                );
                all_ok &= item.passed;
            }
            if all_ok {
                Ok(())
            } else {
                Err(Error::Runtime("verification failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
