//! Training loop: feature preparation with global CMVN, static length-sorted
//! batching, the combined CTC+attention objective, Novograd updates on the
//! cosine schedule, CSV metrics, checkpointing and bit-exact resume.

use std::io::Write;
use std::path::PathBuf;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ModelConfig;
use crate::decode::{cer, decode_batch};
use crate::error::{Error, Result};
use crate::features::{cmvn_apply, cmvn_fit, fbank, spec_augment_step, FeatureBatch};
use crate::graph::{Ctx, Graph};
use crate::loss::{att_kl_loss, combined_loss, ctc_loss_batch, CtcStatus, LossWeights};
use crate::model::{CitrinetModel, Direction, InitMode};
use crate::optim::{clip_grad_norm, cosine_lr, Novograd, NOVOGRAD_BETA1, NOVOGRAD_BETA2};
use crate::rng::{seeded, Rng};
use crate::synth::SynthSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub ctc: f64,
    pub att_l2r: Option<f64>,
    pub att_r2l: Option<f64>,
    pub combined: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.ctc,
            opt(self.att_l2r),
            opt(self.att_r2l),
            self.combined
        )
    }
}

#[derive(Debug, Default, Clone)]
pub struct TrainOptions {
    /// Train until this absolute step count (resume continues toward it).
    pub steps: u64,
    pub log_path: Option<PathBuf>,
    pub ckpt_path: Option<PathBuf>,
    /// Decode the training set every k steps and record CER.
    pub eval_every: Option<u64>,
    /// Stop once training-set CER falls to or below this value.
    pub stop_at_cer: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub diverged: bool,
    pub stopped_early: bool,
    pub metrics: Vec<StepMetrics>,
    /// (step, training-set CER) pairs from periodic evaluation.
    pub eval_history: Vec<(u64, f64)>,
}

pub struct Trainer {
    pub model: CitrinetModel,
    pub optim: Novograd,
    pub rng: Rng,
    pub step: u64,
}

impl Trainer {
    /// Fresh trainer: seeded parameters, CMVN fitted over the dataset.
    pub fn new(config: &ModelConfig, dataset: &[SynthSample], seed: u64) -> Result<Trainer> {
        let model = CitrinetModel::build(config, InitMode::Seeded(seed))?;
        let raw = raw_features(config, dataset)?;
        let stats = cmvn_fit(&raw)?;
        model.set_cmvn(&stats);
        let table = model.params();
        let optim = Novograd::new(&table, NOVOGRAD_BETA1, NOVOGRAD_BETA2, config.weight_decay);
        Ok(Trainer {
            model,
            optim,
            rng: seeded(seed, 0x7124),
            step: 0,
        })
    }

    pub fn resume(path: &std::path::Path) -> Result<Trainer> {
        let loaded = load_checkpoint(path)?;
        let optim = loaded.optim.ok_or_else(|| {
            Error::Format("checkpoint has no optimizer state; cannot resume training".into())
        })?;
        Ok(Trainer {
            model: loaded.model,
            optim,
            rng: loaded.rng,
            step: loaded.step,
        })
    }
}

/// Un-normalized FBank features per sample (dither seeded per utterance).
pub fn raw_features(config: &ModelConfig, dataset: &[SynthSample]) -> Result<Vec<Tensor>> {
    dataset
        .iter()
        .map(|s| fbank(&s.waveform(), config.dither, s.seed))
        .collect()
}

/// Static batching: sort by feature length (longest first), then fill each
/// bucket until its padded frame count would exceed the budget.
pub fn static_batches(lengths: &[usize], max_frames_per_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0usize;
    for idx in order {
        let new_max = current_max.max(lengths[idx]);
        if !current.is_empty() && new_max * (current.len() + 1) > max_frames_per_batch {
            batches.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(lengths[idx]);
        current.push(idx);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Mean training-set CER under the current parameters (eval mode decode).
pub fn dataset_cer(model: &CitrinetModel, dataset: &[SynthSample], raw: &[Tensor]) -> Result<f64> {
    let decoded = decode_batch(model, raw)?;
    let mut total = 0.0;
    for (out, sample) in decoded.iter().zip(dataset) {
        total += cer(&out.tokens, &sample.tokens)?;
    }
    Ok(total / dataset.len() as f64)
}

/// Drive training to `opts.steps`. Deterministic given (trainer state,
/// dataset); divergence aborts, leaving the last interval checkpoint as the
/// most recent good state.
pub fn run_training(
    trainer: &mut Trainer,
    dataset: &[SynthSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let config = trainer.model.config.clone();
    let raw = raw_features(&config, dataset)?;
    let stats = trainer.model.cmvn();
    let normalized: Vec<Tensor> = raw.iter().map(|m| cmvn_apply(m, &stats)).collect();
    let lengths: Vec<usize> = normalized.iter().map(|m| m.shape()[1]).collect();
    let batches = static_batches(&lengths, config.max_frames_per_batch);
    let weights = LossWeights {
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        delta: config.delta,
    };
    let mut log_file = match &opts.log_path {
        Some(p) => {
            let fresh = trainer.step == 0 || !p.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)?;
            if fresh {
                writeln!(f, "step,lr,ctc,att_l2r,att_r2l,combined")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut outcome = TrainOutcome {
        final_step: trainer.step,
        diverged: false,
        stopped_early: false,
        metrics: Vec::new(),
        eval_history: Vec::new(),
    };
    while trainer.step < opts.steps {
        let step = trainer.step + 1;
        let lr = cosine_lr(step, config.lr_max, config.warmup_steps as u64, config.total_steps as u64, config.lr_min);
        let batch_ids = &batches[((step - 1) as usize) % batches.len()];
        let mats: Vec<Tensor> = batch_ids
            .iter()
            .map(|&i| {
                if config.spec_augment {
                    spec_augment_step(&normalized[i], &mut trainer.rng)
                } else {
                    normalized[i].clone()
                }
            })
            .collect();
        let fb = FeatureBatch::new(&mats);
        let targets: Vec<Vec<usize>> = batch_ids.iter().map(|&i| dataset[i].tokens.clone()).collect();
        let mut graph = Graph::new();
        let mut ctx = Ctx::training(&mut graph, &mut trainer.rng);
        let (enc, enc_valid) = trainer.model.encode(&mut ctx, &fb.features, &fb.valid_len)?;
        let lp = trainer.model.ctc_log_probs(&mut ctx, &enc)?;
        let ctc = ctc_loss_batch(
            &mut ctx.graph,
            &lp,
            &enc_valid,
            &targets,
            trainer.model.vocab.blank(),
        )?;
        if ctc.statuses.iter().any(|s| *s != CtcStatus::Ok) {
            return Err(Error::Input(
                "a target is longer than its encoded frame count admits".into(),
            ));
        }
        let (att_l2r, att_r2l) = if trainer.model.decoder.is_some() {
            let (logits_f, ref_f) =
                trainer
                    .model
                    .decoder_logits(&mut ctx, &enc, &enc_valid, &targets, Direction::L2r)?;
            let lp_f = ctx.graph.log_softmax(&logits_f, 2);
            let loss_f = att_kl_loss(&mut ctx.graph, &lp_f, &ref_f, config.delta, &trainer.model.vocab)?;
            let (logits_r, ref_r) =
                trainer
                    .model
                    .decoder_logits(&mut ctx, &enc, &enc_valid, &targets, Direction::R2l)?;
            let lp_r = ctx.graph.log_softmax(&logits_r, 2);
            let loss_r = att_kl_loss(&mut ctx.graph, &lp_r, &ref_r, config.delta, &trainer.model.vocab)?;
            (Some(loss_f), Some(loss_r))
        } else {
            (None, None)
        };
        let total = combined_loss(&mut ctx.graph, &ctc.loss, att_l2r.as_ref(), att_r2l.as_ref(), &weights);
        let metrics = StepMetrics {
            step,
            lr,
            ctc: ctc.loss.item(),
            att_l2r: att_l2r.as_ref().map(|t| t.item()),
            att_r2l: att_r2l.as_ref().map(|t| t.item()),
            combined: total.item(),
        };
        if !metrics.combined.is_finite() {
            outcome.diverged = true;
            outcome.metrics.push(metrics);
            break;
        }
        graph.backward(&total)?;
        drop(graph);
        let table = trainer.model.params();
        clip_grad_norm(&table, config.grad_clip);
        trainer.optim.step(&table, lr);
        table.zero_grads();
        trainer.step = step;
        outcome.final_step = step;
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", metrics.csv_row())?;
        }
        outcome.metrics.push(metrics);
        if let (Some(path), true) = (
            &opts.ckpt_path,
            config.ckpt_interval > 0 && step % config.ckpt_interval as u64 == 0,
        ) {
            save_checkpoint(path, &trainer.model, Some(&trainer.optim), &trainer.rng, step)?;
        }
        if let Some(every) = opts.eval_every {
            if step % every == 0 {
                let c = dataset_cer(&trainer.model, dataset, &raw)?;
                outcome.eval_history.push((step, c));
                if opts.stop_at_cer.map(|t| c <= t).unwrap_or(false) {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(path) = &opts.ckpt_path {
        if !outcome.diverged {
            save_checkpoint(path, &trainer.model, Some(&trainer.optim), &trainer.rng, trainer.step)?;
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_dataset;

    fn tiny_config(variant_attc: bool) -> ModelConfig {
        let mut cfg = if variant_attc {
            ModelConfig::att_citrinet(16)
        } else {
            ModelConfig::citrinet(16)
        };
        cfg.total_blocks = 3;
        cfg.vocab = 8;
        cfg.decoder_dim = 16;
        cfg.epilog_dim = 24;
        cfg.dropout = 0.0;
        cfg.spec_augment = false;
        cfg.warmup_steps = 5;
        cfg.total_steps = 200;
        cfg.max_frames_per_batch = 400;
        cfg.ckpt_interval = 5;
        cfg
    }

    #[test]
    fn static_batches_cover_all_items_sorted() {
        let lengths = vec![30, 80, 50, 80, 10, 60];
        let batches = static_batches(&lengths, 200);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4, 5]);
        for batch in &batches {
            let max = batch.iter().map(|&i| lengths[i]).max().unwrap();
            assert!(max * batch.len() <= 200 || batch.len() == 1);
        }
    }

    #[test]
    fn c_variant_logs_absent_attention_losses() {
        let cfg = tiny_config(false);
        let ds = synth_dataset(3, 5, 8, 1, 2).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds, 11).unwrap();
        let opts = TrainOptions {
            steps: 2,
            ..Default::default()
        };
        let out = run_training(&mut trainer, &ds, &opts).unwrap();
        assert_eq!(out.metrics.len(), 2);
        for m in &out.metrics {
            assert!(m.att_l2r.is_none());
            assert!(m.att_r2l.is_none());
            assert_eq!(m.combined.to_bits(), m.ctc.to_bits());
            let row = m.csv_row();
            assert!(row.contains(",,"));
        }
    }

    #[test]
    fn loss_decreases_after_warmed_steps() {
        let mut cfg = tiny_config(true);
        cfg.warmup_steps = 2;
        cfg.total_steps = 60;
        let ds = synth_dataset(3, 9, 8, 1, 2).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds, 3).unwrap();
        let opts = TrainOptions {
            steps: 40,
            ..Default::default()
        };
        let out = run_training(&mut trainer, &ds, &opts).unwrap();
        assert!(!out.diverged);
        let first = out.metrics.first().unwrap().combined;
        let last = out.metrics.last().unwrap().combined;
        assert!(
            last < first,
            "loss failed to decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let cfg = tiny_config(true);
        let ds = synth_dataset(4, 21, 8, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");

        // Uninterrupted: 20 steps.
        let mut full = Trainer::new(&cfg, &ds, 7).unwrap();
        let out_full = run_training(
            &mut full,
            &ds,
            &TrainOptions {
                steps: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!out_full.diverged);

        // Interrupted at 10 steps, checkpointed, resumed for 10 more.
        let mut half = Trainer::new(&cfg, &ds, 7).unwrap();
        run_training(
            &mut half,
            &ds,
            &TrainOptions {
                steps: 10,
                ckpt_path: Some(ckpt.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let mut resumed = Trainer::resume(&ckpt).unwrap();
        assert_eq!(resumed.step, 10);
        let out_res = run_training(
            &mut resumed,
            &ds,
            &TrainOptions {
                steps: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out_res.final_step, 20);

        let a = full.model.params();
        let b = resumed.model.params();
        for ((n1, t1, _), (n2, t2, _)) in a.entries.iter().zip(&b.entries) {
            assert_eq!(n1, n2);
            for (x, y) in t1.data().iter().zip(t2.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {n1} diverged after resume");
            }
        }
        // Per-step losses over the resumed stretch match too.
        for (m_full, m_res) in out_full.metrics[10..].iter().zip(&out_res.metrics) {
            assert_eq!(m_full.combined.to_bits(), m_res.combined.to_bits());
        }
    }
}
