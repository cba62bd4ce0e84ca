use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tie::config::{Overrides, RunConfig};
use tie::metrics::{render_table, ScoreReport};
use tie::pipeline;
use tie::schema::Split;
use tie::synth::SynthKind;

#[derive(Parser)]
#[command(name = "tie", version, about = "Instructed token-pair extraction: pretrain, finetune, score, decode")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Decoding threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-dataset pretraining on the configured sources.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume a saved pretraining run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finetune on the configured target, from a pretrained checkpoint or
    /// from scratch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a split of a dataset with a saved model, or score a
    /// predictions file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Predictions in the dataset line format, instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Decode sentences from a JSONL file.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Dataset id whose instruction and labels to use.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Finite-difference check of every model gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic datasets and instruction files.
    Synth {
        #[command(flatten)]
        common: Common,
        /// ner, re, ee, absa, aligned, conflict or all.
        #[arg(long, default_value = "all")]
        kind: SynthKind,
        /// Training instances per dataset.
        #[arg(long, default_value_t = 500)]
        size: usize,
    },
}

/// JSON-lines logger on stderr, level from `TIE_LOG`.
struct JsonLogger {
    level: log::LevelFilter,
}

impl log::Log for JsonLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= self.level
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": r.level().as_str().to_lowercase(),
            "target": r.target(),
            "message": r.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("TIE_LOG").as_deref() {
        Err(_) | Ok("") | Ok("warn") => log::LevelFilter::Warn,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => bail!("TIE_LOG must be one of debug, info, warn (got `{other}`)"),
    };
    log::set_boxed_logger(Box::new(JsonLogger { level })).context("installing the logger")?;
    log::set_max_level(level);
    Ok(())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            tau: self.threshold,
            out: self.out.clone(),
            gate: None,
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_deref().context("--config is required")?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed, threshold and output directory, from flags or else the config.
    fn light(&self) -> Result<(u64, f64, PathBuf)> {
        let cfg = self.config.as_deref().map(RunConfig::load).transpose()?.map(|mut c| {
            c.apply(&self.overrides());
            c
        });
        let seed = self.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
        let tau = self
            .threshold
            .or(cfg.as_ref().map(|c| c.tau))
            .unwrap_or(tie::codec::DEFAULT_THRESHOLD);
        let out = self
            .out
            .clone()
            .or(cfg.map(|c| c.out))
            .context("--out is required without --config")?;
        Ok((seed, tau, out))
    }
}

fn print_reports(reports: &[ScoreReport]) {
    print!("{}", render_table(reports));
}

fn existing(p: &Path) -> Result<&Path> {
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, checkpoint } => {
            let cfg = common.run_config()?;
            let resume = checkpoint.as_deref().map(existing).transpose()?;
            let summary = pipeline::run_pretrain(&cfg, resume)?;
            if let Some(last) = summary.epochs.last() {
                print_reports(&last.dev);
            }
            println!(
                "skip rate {:.4} over {} group comparisons",
                summary.gate.skip_rate(),
                summary.gate.compared
            );
            println!("{}", cfg.out.join("pretrain.ckpt").display());
        }
        Command::Finetune { common, checkpoint } => {
            let cfg = common.run_config()?;
            let start = checkpoint.as_deref().map(existing).transpose()?;
            let m = pipeline::run_finetune(&cfg, start)?;
            print_reports(&[m.dev, m.test]);
            println!("{}", cfg.out.join("finetune.ckpt").display());
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            split,
            predictions,
        } => {
            let (_, tau, out) = common.light()?;
            let report = match (checkpoint, predictions) {
                (_, Some(p)) => pipeline::run_score(existing(&p)?, &dataset, split, &out)?,
                (Some(c), None) => pipeline::run_eval(existing(&c)?, &dataset, split, tau, &out)?,
                (None, None) => bail!("either --checkpoint or --predictions is required"),
            };
            print_reports(&[report]);
        }
        Command::Decode {
            common,
            checkpoint,
            input,
            dataset,
        } => {
            let (_, tau, out) = common.light()?;
            let decoded = pipeline::run_decode(existing(&checkpoint)?, dataset.as_deref(), &input, tau, &out)?;
            println!("decoded {} sentences to {}", decoded.len(), out.join("predictions.jsonl").display());
        }
        Command::Gradcheck { common } => {
            let (seed, _, out) = common.light()?;
            let s = pipeline::run_gradcheck(seed, &out)?;
            println!("{:<10} {:>8} {:>12}", "case", "params", "max rel err");
            for c in &s.cases {
                println!(
                    "{:<10} {:>8} {:>12.3e}",
                    format!("n={} K={}", c.sentence_len, c.channels),
                    c.report.params.len(),
                    c.report.max_rel_err()
                );
            }
            println!("{}", if s.pass { "PASS" } else { "FAIL" });
            if !s.pass {
                bail!("gradient check failed (max rel err {:.3e})", s.max_rel_err);
            }
        }
        Command::Synth { common, kind, size } => {
            let (seed, _, out) = common.light()?;
            for (manifest, instr) in pipeline::run_synth(kind, size, seed, &out)? {
                println!("{}\t{}", manifest.display(), instr.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Err(e) = init_logging() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
