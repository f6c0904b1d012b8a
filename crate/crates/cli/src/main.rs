//! Command-line harness: synthetic data generation, training, decoding,
//! scoring, gradient checks, parameter census and schedule inspection.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use citrinet::config::{ModelConfig, Variant};
use citrinet::decode::{cer, decode_batch};
use citrinet::features::write_feature_dump;
use citrinet::gradcheck::gradcheck_model;
use citrinet::model::{count_params, kernel_schedule, params_breakdown};
use citrinet::synth::{read_manifest, synth_dataset, write_manifest};
use citrinet::train::{raw_features, run_training, Trainer, TrainOptions};

#[derive(Parser)]
#[command(name = "citrinet", about = "Citrinet / attention-enhanced Citrinet speech recognition at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant shortcut when no config file is given (c | att-c).
    #[arg(long)]
    variant: Option<String>,
    /// Channel width for the variant shortcut.
    #[arg(long)]
    channels: Option<usize>,
    /// Override the block total.
    #[arg(long)]
    total_blocks: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.variant) {
            (Some(path), _) => ModelConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            (None, Some(v)) => {
                let channels = self
                    .channels
                    .context("--channels is required with --variant")?;
                match Variant::parse(v)? {
                    Variant::C => ModelConfig::citrinet(channels),
                    Variant::AttC => ModelConfig::att_citrinet(channels),
                }
            }
            (None, None) => bail!("provide either --config or --variant/--channels"),
        };
        if let Some(t) = self.total_blocks {
            cfg.total_blocks = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tone-sequence dataset manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        vocab_subset: usize,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long, default_value_t = 5)]
        max_len: usize,
        /// Also dump per-sample FBank features (binary) into this directory.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Train a model on a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Train to this absolute step count (default: config total_steps).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Decode the training set every k steps and report CER.
        #[arg(long)]
        eval_every: Option<u64>,
        /// Stop early once training CER reaches this value.
        #[arg(long)]
        stop_cer: Option<f64>,
    },
    /// Decode a manifest with a trained checkpoint.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write hypotheses here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a manifest and score CER against its references.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Test fixture: corrupt this tensor's gradient; the check must fail.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Print the parameter census.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the block/kernel layout.
    Schedule {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            n,
            seed,
            vocab_subset,
            min_len,
            max_len,
            dump_features,
        } => {
            let ds = synth_dataset(n, seed, vocab_subset, min_len, max_len)?;
            write_manifest(&out, &ds, vocab_subset)?;
            if let Some(dir) = dump_features {
                std::fs::create_dir_all(&dir)?;
                for (i, s) in ds.iter().enumerate() {
                    let feats = citrinet::features::fbank(&s.waveform(), 1.0, s.seed)?;
                    write_feature_dump(&dir.join(format!("sample{i:04}.fbank")), &feats)?;
                }
            }
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            steps,
            resume,
            log,
            seed,
            eval_every,
            stop_cer,
        } => {
            let (dataset, _) = read_manifest(&data)?;
            let mut trainer = match &resume {
                Some(path) => Trainer::resume(path)?,
                None => {
                    let cfg = config.resolve()?;
                    Trainer::new(&cfg, &dataset, seed)?
                }
            };
            let target = steps.unwrap_or(trainer.model.config.total_steps as u64);
            let opts = TrainOptions {
                steps: target,
                log_path: log,
                ckpt_path: Some(out.clone()),
                eval_every,
                stop_at_cer: stop_cer,
            };
            let outcome = run_training(&mut trainer, &dataset, &opts)?;
            if let Some(m) = outcome.metrics.last() {
                println!(
                    "step {} lr {:.6} ctc {:.4} combined {:.4}",
                    m.step, m.lr, m.ctc, m.combined
                );
            }
            for (step, c) in &outcome.eval_history {
                println!("eval step {step}: train CER {c:.4}");
            }
            if outcome.diverged {
                bail!(
                    "training diverged at step {}; last interval checkpoint in {} is the most recent good state",
                    outcome.final_step + 1,
                    out.display()
                );
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Decode { ckpt, data, out } => {
            let loaded = citrinet::checkpoint::load_checkpoint(&ckpt)?;
            let (dataset, _) = read_manifest(&data)?;
            let raw = raw_features(&loaded.model.config, &dataset)?;
            let decoded = decode_batch(&loaded.model, &raw)?;
            let mut lines = String::new();
            for (i, d) in decoded.iter().enumerate() {
                let toks: Vec<String> = d.tokens.iter().map(|t| t.to_string()).collect();
                let line = format!("{i}\t{:.4}\t{}", d.score, toks.join(" "));
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
            }
            if let Some(path) = out {
                std::fs::write(path, lines)?;
            }
        }
        Command::Eval { ckpt, data } => {
            let loaded = citrinet::checkpoint::load_checkpoint(&ckpt)?;
            let (dataset, _) = read_manifest(&data)?;
            let raw = raw_features(&loaded.model.config, &dataset)?;
            let decoded = decode_batch(&loaded.model, &raw)?;
            let mut total = 0.0;
            for (d, s) in decoded.iter().zip(&dataset) {
                total += cer(&d.tokens, &s.tokens)?;
            }
            println!("CER {:.4} over {} utterances", total / dataset.len() as f64, dataset.len());
        }
        Command::Gradcheck {
            config,
            seed,
            corrupt,
        } => {
            let cfg = config.resolve()?;
            let report = gradcheck_model(&cfg, seed, corrupt.as_deref())?;
            print!("{}", report.render());
            if !report.passed() {
                std::process::exit(1);
            }
        }
        Command::Params { config } => {
            let cfg = config.resolve()?;
            let breakdown = params_breakdown(&cfg)?;
            for (group, n) in &breakdown {
                println!("{group:<24} {n:>12}");
            }
            let total = count_params(&cfg)?;
            println!("{:<24} {total:>12}  ({:.1}M)", "total", total as f64 / 1e6);
        }
        Command::Schedule { config } => {
            let cfg = config.resolve()?;
            println!(
                "{:<16} {:>5} {:>5} {:>3} {:>7} {:>7} {:>9} {:>9}",
                "block", "cin", "cout", "k", "stride", "repeat", "residual", "enhanced"
            );
            for sb in kernel_schedule(&cfg)? {
                println!(
                    "{:<16} {:>5} {:>5} {:>3} {:>7} {:>7} {:>9} {:>9}",
                    sb.name,
                    sb.spec.in_channels,
                    sb.spec.out_channels,
                    sb.spec.kernel,
                    sb.spec.stride,
                    sb.spec.repeat,
                    sb.spec.has_residual,
                    sb.spec.attention_enhanced
                );
            }
        }
    }
    Ok(())
}
