//! Whole-model gradient verification: analytic backward against central
//! finite differences on sampled entries of every parameter tensor.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::features::{cmvn_apply, cmvn_fit, FeatureBatch};
use crate::graph::{Ctx, Graph};
use crate::loss::{att_kl_loss, combined_loss, ctc_loss_batch, LossWeights};
use crate::model::{CitrinetModel, Direction, InitMode};
use crate::rng::{seeded, uniform_range};
use crate::synth::synth_dataset;
use crate::tensor::Tensor;
use crate::train::raw_features;

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const ENTRIES_PER_TENSOR: usize = 4;

/// `|a - f| / max(floor, |a|, |f|)`: relative when the gradients are sizable,
/// effectively absolute below the floor so finite-difference noise on
/// zero-gradient entries does not trip the check.
pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_entries: usize,
}

#[derive(Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.threshold)
    }

    pub fn offenders(&self) -> Vec<&GradcheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err > self.threshold)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let mark = if e.max_rel_err <= self.threshold { "ok  " } else { "FAIL" };
            s.push_str(&format!(
                "{mark} {:<55} max_rel_err {:>12.3e} ({} entries)\n",
                e.name, e.max_rel_err, e.checked_entries
            ));
        }
        s.push_str(&format!(
            "{}: {} tensors checked, threshold {:.0e}\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.entries.len(),
            self.threshold
        ));
        s
    }
}

/// Run the full-model gradient check on a (small) config. Dropout is forced
/// off and batch-norm statistic updates are frozen so the loss is a pure
/// deterministic function of the parameters. `corrupt` is a test fixture:
/// the named tensor's analytic gradient is perturbed before comparison, so
/// the check must report it as failing.
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<GradcheckReport> {
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    cfg.spec_augment = false;
    let model = CitrinetModel::build(&cfg, InitMode::Seeded(seed))?;
    let dataset = synth_dataset(2, seed, cfg.vocab.min(8), 1, 2)?;
    let raw = raw_features(&cfg, &dataset)?;
    let stats = cmvn_fit(&raw)?;
    model.set_cmvn(&stats);
    let normalized: Vec<Tensor> = raw.iter().map(|m| cmvn_apply(m, &stats)).collect();
    let fb = FeatureBatch::new(&normalized);
    let targets: Vec<Vec<usize>> = dataset.iter().map(|s| s.tokens.clone()).collect();
    let weights = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        delta: cfg.delta,
    };

    let loss_of = |record: bool| -> Result<(f64, Option<Graph>)> {
        let mut graph = if record { Graph::new() } else { Graph::inference() };
        let mut rng = seeded(0, 0);
        let mut ctx = Ctx {
            graph: &mut graph,
            train: true,
            update_stats: false,
            rng: &mut rng,
        };
        let (enc, enc_valid) = model.encode(&mut ctx, &fb.features, &fb.valid_len)?;
        let lp = model.ctc_log_probs(&mut ctx, &enc)?;
        let ctc = ctc_loss_batch(ctx.graph, &lp, &enc_valid, &targets, model.vocab.blank())?;
        let (l2r, r2l) = if model.decoder.is_some() {
            let (logits_f, ref_f) =
                model.decoder_logits(&mut ctx, &enc, &enc_valid, &targets, Direction::L2r)?;
            let lp_f = ctx.graph.log_softmax(&logits_f, 2);
            let lf = att_kl_loss(ctx.graph, &lp_f, &ref_f, cfg.delta, &model.vocab)?;
            let (logits_r, ref_r) =
                model.decoder_logits(&mut ctx, &enc, &enc_valid, &targets, Direction::R2l)?;
            let lp_r = ctx.graph.log_softmax(&logits_r, 2);
            let lr = att_kl_loss(ctx.graph, &lp_r, &ref_r, cfg.delta, &model.vocab)?;
            (Some(lf), Some(lr))
        } else {
            (None, None)
        };
        let total = combined_loss(ctx.graph, &ctc.loss, l2r.as_ref(), r2l.as_ref(), &weights);
        let value = total.item();
        if record {
            graph.backward(&total)?;
            Ok((value, Some(graph)))
        } else {
            Ok((value, None))
        }
    };

    let table = model.params();
    table.zero_grads();
    loss_of(true)?;
    let mut entries = Vec::new();
    for (t_ix, (name, tensor)) in table.trainable().enumerate() {
        let mut analytic = tensor.grad_vec();
        if corrupt == Some(name) {
            for v in analytic.iter_mut() {
                *v += 0.5;
            }
        }
        let mut pick = seeded(seed ^ 0xD00D, t_ix as u64);
        let n = tensor.numel();
        let count = ENTRIES_PER_TENSOR.min(n);
        let mut max_err: f64 = 0.0;
        for _ in 0..count {
            let i = uniform_range(&mut pick, 0, n - 1);
            let orig = tensor.at(i);
            tensor.with_data_mut(|d| d[i] = orig + FD_STEP);
            let (plus, _) = loss_of(false)?;
            tensor.with_data_mut(|d| d[i] = orig - FD_STEP);
            let (minus, _) = loss_of(false)?;
            tensor.with_data_mut(|d| d[i] = orig);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[i], fd, 1e-3));
        }
        entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel_err: max_err,
            checked_entries: count,
        });
    }
    table.zero_grads();
    Ok(GradcheckReport {
        entries,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::att_citrinet(16);
        cfg.total_blocks = 3;
        cfg.vocab = 8;
        cfg.decoder_dim = 16;
        cfg.epilog_dim = 24;
        cfg
    }

    #[test]
    fn fresh_model_passes() {
        let report = gradcheck_model(&tiny_config(), 5, None).unwrap();
        assert!(report.passed(), "{}", report.render());
        // Covers every structural piece.
        let names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
        for needle in ["se", "res", "ffn", "attn", "decoder", "ctc_head"] {
            assert!(
                names.iter().any(|n| n.contains(needle)),
                "no tensor matching {needle}"
            );
        }
    }

    #[test]
    fn corrupted_gradient_detected() {
        let report = gradcheck_model(&tiny_config(), 5, Some("ctc_head.bias")).unwrap();
        assert!(!report.passed());
        let off = report.offenders();
        assert!(off.iter().any(|e| e.name == "ctc_head.bias"));
    }

    #[test]
    fn report_deterministic_per_seed() {
        let a = gradcheck_model(&tiny_config(), 8, None).unwrap();
        let b = gradcheck_model(&tiny_config(), 8, None).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
