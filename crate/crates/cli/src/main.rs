//! `tfsep`: synthesize corpora, train, separate and evaluate.
//!
//! Logs go to stderr; artifacts go to files and machine-readable output to stdout.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tfsep::audio::SynthSpec;
use tfsep::config::TrainConfig;
use tfsep::data::{generate_synthetic_manifest, Manifest, Split, MANIFEST_FILE};
use tfsep::metrics::eval_corpus;
use tfsep::separator::separate_corpus;
use tfsep::trainer::Trainer;

#[derive(Parser)]
#[command(name = "tfsep", version, about = "Time-frequency mask speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of mixtures and a manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override such as `optimizer.lr=0.01`; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint directory used when the config does not name one.
        #[arg(long, env = "TFSEP_CHECKPOINT_DIR")]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Separate the mixtures of one split into `<utt>_s<k>.wav` files.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score separated files against the references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            spec,
            out,
            count,
            seed,
        } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SynthSpec =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let m = generate_synthetic_manifest(&out, count, &spec, seed)?;
            eprintln!("wrote {} mixtures", m.entries.len());
            println!("{}", out.join(MANIFEST_FILE).display());
        }
        Command::Train {
            config,
            overrides,
            checkpoint_dir,
            resume,
        } => {
            let mut cfg = TrainConfig::load(&config, &overrides)
                .with_context(|| format!("loading {}", config.display()))?;
            if cfg.checkpoint_dir.is_none() {
                cfg.checkpoint_dir = checkpoint_dir;
            }
            eprintln!(
                "training {} with {} into {}",
                cfg.model_key.key(),
                cfg.loss_key.key(),
                cfg.checkpoint_dir().display()
            );
            let trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, ckpt)?,
                None => Trainer::new(cfg)?,
            };
            let outcome = trainer
                .on_epoch(|r| {
                    println!("{}", serde_json::to_string(r).expect("record serializes"));
                })
                .run()?;
            eprintln!(
                "stopped after epoch {}; best epoch {} (valid {:.6})",
                outcome.last_epoch, outcome.best_epoch, outcome.best_valid_loss
            );
        }
        Command::Separate {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            if !checkpoint.exists() {
                bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let m = Manifest::load(&manifest)?;
            let done = separate_corpus(&checkpoint, &m, Split::parse(&split)?, &out)?;
            for u in &done {
                eprintln!("{}: {:?}", u.id, u.method);
            }
            let method = done.first().map(|u| u.method);
            println!(
                "{}",
                serde_json::json!({ "utterances": done.len(), "method": method, "out": out })
            );
        }
        Command::Evaluate {
            manifest,
            split,
            estimates,
            report,
        } => {
            let m = Manifest::load(&manifest)?;
            let r = eval_corpus(&m, Split::parse(&split)?, &estimates)?;
            fs::write(&report, r.to_json() + "\n").with_context(|| format!("writing {}", report.display()))?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}
