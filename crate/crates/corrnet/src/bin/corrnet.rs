//! Command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corrnet::config::{self, ModelConfig};
use corrnet::{gradcheck, run};

#[derive(Parser)]
#[command(name = "corrnet", version, about = "Correlation-network video sequence recognizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.epochs=4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> corrnet::Result<ModelConfig> {
        let overrides: Vec<(String, String)> = self
            .set
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<corrnet::Result<_>>()?;
        match &self.config {
            Some(path) => config::load(path, &overrides),
            None => config::from_toml_str("", &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic trajectory task and log per-epoch dev WER.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for checkpoints, metrics and the config snapshot.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a synthetic split and report corpus WER.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the finite-difference gradient suite (real64) and report per-op
    /// worst relative errors.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export gated correlation maps and attention summaries as CSV.
    ExportMaps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dev-split sample index.
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// 1-based stage; must carry an inserted block.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> corrnet::Result<ExitCode> {
    match cli.command {
        Command::Train { cfg, out, seed, epochs } => {
            let cfg = cfg.load()?;
            let summary = run::train(&cfg, &out, seed, epochs, false)?;
            if summary.epochs == 0 {
                println!("wrote initial checkpoint to {}", out.display());
            } else {
                println!("best dev WER {:.4} over {} epochs", summary.best_dev_wer, summary.epochs);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { cfg, checkpoint, split, seed } => {
            let cfg = cfg.load()?;
            let result = run::evaluate(&cfg, &checkpoint, &split, seed)?;
            let json = serde_json::to_string(&result).expect("result serializes");
            println!("{json}");
            let report = checkpoint
                .parent()
                .unwrap_or_else(|| std::path::Path::new("."))
                .join(format!("eval_{split}.json"));
            std::fs::write(&report, format!("{json}\n"))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let reports = gradcheck::run_suite(seed)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{:<28} worst-rel-err {:>12.3e}  seeds {:>2}  {}",
                    r.name,
                    r.worst_rel_err,
                    r.seeds,
                    if r.passed { "pass" } else { "FAIL" }
                );
                all_pass &= r.passed;
            }
            let missing = gradcheck::missing_coverage(&reports);
            println!("-- op coverage --");
            for op in corrnet::tensor::tape::DIFFERENTIABLE_OPS {
                let by: Vec<&str> = reports
                    .iter()
                    .filter(|r| r.covers.iter().any(|c| c == op))
                    .map(|r| r.name.as_str())
                    .collect();
                println!("{op:<20} checked by {}", by.join(", "));
            }
            if !missing.is_empty() {
                eprintln!("uncovered differentiable ops: {missing:?}");
                return Ok(ExitCode::FAILURE);
            }
            Ok(if all_pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::ExportMaps { cfg, checkpoint, sample, stage, out, seed } => {
            let cfg = cfg.load()?;
            let (corr, attn) = run::export_maps(&cfg, &checkpoint, sample, stage, &out, seed)?;
            println!("wrote {}", corr.display());
            println!("wrote {}", attn.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
