use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vqqat_core::config::{run_training, RunConfig, CHECKPOINT_FILE, METRICS_FILE};
use vqqat_core::gradcheck::{self, GradcheckConfig};
use vqqat_core::reports::{post_training_quantize, summarize_run};
use vqqat_core::trainer::{accuracy, Checkpoint};
use vqqat_core::Error;

const QUANTIZED_CHECKPOINT_FILE: &str = "quantized_checkpoint.json";
const QUANTIZE_REPORT_FILE: &str = "quantize_report.json";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(name = "vqqat", version, about = "Vector-quantization-aware training toolkit")]
struct Cli {
    /// Configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.json and (for searched runs) arch_report.json.
    Train,
    /// Post-training quantization of a checkpoint with the config's quantizers.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Inference-mode accuracy of a checkpoint on the config's data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of the backward rules.
    Gradcheck {
        /// Run only these suites (repeatable).
        #[arg(long)]
        op: Vec<String>,
        /// Random instances per suite (default 100)
        #[arg(long)]
        instances: Option<usize>,
        /// Perturb analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Summarize a training output directory.
    Report {
        /// Run directory (defaults to --out).
        run_dir: Option<PathBuf>,
    },
}

enum Failure {
    Error(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Internal(_) => 1,
        Error::Config(_) | Error::Idx(_) | Error::Io(_) | Error::Json(_) => 2,
    }
}

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not fatal.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("run"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli);
            let outcome = run_training(&cfg, Some(&out))?;
            if let Some(last) = outcome.rows.last() {
                out!(
                    "trained {} epochs: train_acc {:.4} eval_acc {:.4} avg_bits {}",
                    outcome.rows.len(),
                    last.train_acc,
                    last.eval_acc,
                    last.avg_bits
                );
            }
            out!("wrote {}", out.join(METRICS_FILE).display());
            out!("wrote {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Quantize { checkpoint } => {
            let cfg = load_config(cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            if ck.model.spec != cfg.model {
                return Err(Error::Config("checkpoint model does not match config model".into()).into());
            }
            let (model, report) = post_training_quantize(&ck.model, &cfg.quant, cfg.allow_padding, cfg.seed)?;
            let out = out_dir(cli);
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            Checkpoint::of_model(model).save(&out.join(QUANTIZED_CHECKPOINT_FILE))?;
            write_json(&out.join(QUANTIZE_REPORT_FILE), &report)?;
            for l in &report.layers {
                out!(
                    "{}: {} bits/weight {} CR {} mse {:e}",
                    l.layer, l.kind, l.bits_per_weight, l.compression_ratio, l.mse
                );
            }
            out!("wrote {}", out.join(QUANTIZE_REPORT_FILE).display());
        }
        Command::Eval { checkpoint } => {
            let cfg = load_config(cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            let (train, eval) = cfg.load_data()?;
            let result = serde_json::json!({
                "train_acc": accuracy(&ck.model, &train)?,
                "eval_acc": eval.as_ref().map(|e| accuracy(&ck.model, e)).transpose()?,
                "avg_bits": ck.model.avg_bits(),
            });
            out!("{}", serde_json::to_string_pretty(&result).map_err(Error::from)?);
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(Error::from)?;
                write_json(&out.join("eval.json"), &result)?;
            }
        }
        Command::Gradcheck {
            op,
            instances,
            corrupt_backward,
        } => {
            let mut cfg = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("gradcheck config: {e}")))?
                }
                None => GradcheckConfig::default(),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(n) = instances {
                cfg.instances = *n;
            }
            if !op.is_empty() {
                cfg.ops = Some(op.clone());
            }
            let reports = gradcheck::run_all(&cfg, *corrupt_backward)?;
            for r in &reports {
                out!(
                    "{:<16} instances {:>4} checked {:>6} max_rel_err {:.3e} tol {:.0e} {}",
                    r.op,
                    r.instances,
                    r.checked,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Gradcheck(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Report { run_dir } => {
            let dir = run_dir.clone().or_else(|| cli.out.clone()).ok_or_else(|| {
                Error::Config("report needs a run directory (positional or --out)".into())
            })?;
            let summary = summarize_run(&dir)?;
            write_json(&dir.join(SUMMARY_FILE), &summary)?;
            out!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
        }
    }
    Ok(())
}
