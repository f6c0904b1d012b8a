//! Decoding: greedy CTC collapse, prefix beam search with blank/non-blank
//! score tracking and duplicate-prefix merging, attention rescoring of the
//! n-best list, and character error rate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{cmvn_apply, FeatureBatch};
use crate::graph::{Ctx, Graph};
use crate::loss::{ctc_loss_single, logaddexp, LOG_ZERO};
use crate::model::{CitrinetModel, Direction};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub prefix: Vec<usize>,
    pub log_p_blank: f64,
    pub log_p_nonblank: f64,
    /// Teacher-forced (l2r, r2l) mean log-probs, filled by rescoring.
    pub att_scores: Option<(f64, f64)>,
}

impl BeamHypothesis {
    pub fn score(&self) -> f64 {
        logaddexp(self.log_p_blank, self.log_p_nonblank)
    }
}

/// Per-frame argmax, collapse repeats, drop blanks. Ties break toward the
/// smallest class id.
pub fn ctc_greedy(log_probs: &[f64], t_len: usize, k: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let row = &log_probs[t * k..(t + 1) * k];
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if best != blank && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Exact log-probability of a label sequence under the CTC collapse (sum
/// over every alignment), reusing the loss-side forward recursion.
pub fn ctc_label_log_prob(
    log_probs: &[f64],
    t_len: usize,
    k: usize,
    label: &[usize],
    blank: usize,
) -> f64 {
    match ctc_loss_single(log_probs, t_len, k, label, blank) {
        Some(neg) => -neg,
        None => LOG_ZERO,
    }
}

fn order_hyps(hyps: &mut [(Vec<usize>, f64, f64)]) {
    hyps.sort_by(|a, b| {
        let sa = logaddexp(a.1, a.2);
        let sb = logaddexp(b.1, b.2);
        sb.partial_cmp(&sa)
            .unwrap()
            .then(a.0.len().cmp(&b.0.len()))
            .then(a.0.cmp(&b.0))
    });
}

/// Prefix beam search over `log_probs [t_len, k]`. Returned hypotheses carry
/// exact label log-probabilities (each surviving label is rescored with a
/// full forward pass), sorted best-first with deterministic tie-breaking.
/// Width 1 degenerates to the greedy decode.
pub fn ctc_beam_search(
    log_probs: &[f64],
    t_len: usize,
    k: usize,
    blank: usize,
    beam_width: usize,
) -> Vec<BeamHypothesis> {
    assert!(beam_width >= 1);
    assert_eq!(log_probs.len(), t_len * k);
    if beam_width == 1 {
        let label = ctc_greedy(log_probs, t_len, k, blank);
        let score = ctc_label_log_prob(log_probs, t_len, k, &label, blank);
        return vec![BeamHypothesis {
            prefix: label,
            log_p_blank: score,
            log_p_nonblank: LOG_ZERO,
            att_scores: None,
        }];
    }
    // (log_p_blank, log_p_nonblank) per prefix; BTreeMap keeps accumulation
    // and iteration order deterministic.
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, LOG_ZERO));
    for t in 0..t_len {
        let row = &log_probs[t * k..(t + 1) * k];
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = logaddexp(pb, pnb);
            for (c, &p) in row.iter().enumerate() {
                if c == blank {
                    let e = next.entry(prefix.clone()).or_insert((LOG_ZERO, LOG_ZERO));
                    e.0 = logaddexp(e.0, total + p);
                } else if prefix.last() == Some(&c) {
                    // Repeated symbol: extends the non-blank path of the same
                    // prefix, or starts a new symbol after a blank.
                    let e = next.entry(prefix.clone()).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logaddexp(e.1, pnb + p);
                    let mut grown = prefix.clone();
                    grown.push(c);
                    let e = next.entry(grown).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logaddexp(e.1, pb + p);
                } else {
                    let mut grown = prefix.clone();
                    grown.push(c);
                    let e = next.entry(grown).or_insert((LOG_ZERO, LOG_ZERO));
                    e.1 = logaddexp(e.1, total + p);
                }
            }
        }
        let mut pool: Vec<(Vec<usize>, f64, f64)> =
            next.into_iter().map(|(p, (b, n))| (p, b, n)).collect();
        order_hyps(&mut pool);
        pool.truncate(beam_width);
        beams = pool.into_iter().map(|(p, b, n)| (p, (b, n))).collect();
    }
    // The greedy label always earns a slot so narrow beams never score
    // below the degenerate width-1 decode.
    beams
        .entry(ctc_greedy(log_probs, t_len, k, blank))
        .or_insert((LOG_ZERO, LOG_ZERO));
    let mut out: Vec<BeamHypothesis> = beams
        .into_iter()
        .map(|(prefix, _)| {
            let exact = ctc_label_log_prob(log_probs, t_len, k, &prefix, blank);
            BeamHypothesis {
                prefix,
                log_p_blank: exact,
                log_p_nonblank: LOG_ZERO,
                att_scores: None,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score()
            .partial_cmp(&a.score())
            .unwrap()
            .then(a.prefix.len().cmp(&b.prefix.len()))
            .then(a.prefix.cmp(&b.prefix))
    });
    out
}

/// Teacher-force every n-best hypothesis through both decoder directions and
/// combine: `w_ctc*s_ctc + (1-w_ctc)*(l2*s_l2r + (1-l2)*s_r2l)`. Ties break
/// toward the shorter, then lexicographically smaller hypothesis.
pub fn attention_rescore(
    model: &CitrinetModel,
    nbest: &[BeamHypothesis],
    enc: &Tensor,
    enc_valid: &[usize],
    w_ctc: f64,
    lambda2: f64,
) -> Result<BeamHypothesis> {
    if nbest.is_empty() {
        return Err(Error::Input("attention rescoring on an empty n-best list".into()));
    }
    if nbest.len() == 1 || w_ctc >= 1.0 || model.decoder.is_none() {
        return Ok(nbest[0].clone());
    }
    let mut scored = nbest.to_vec();
    let mut combined = Vec::with_capacity(scored.len());
    for hyp in scored.iter_mut() {
        let s_l2r = teacher_forced_score(model, enc, enc_valid, &hyp.prefix, Direction::L2r)?;
        let s_r2l = teacher_forced_score(model, enc, enc_valid, &hyp.prefix, Direction::R2l)?;
        hyp.att_scores = Some((s_l2r, s_r2l));
        combined
            .push(w_ctc * hyp.score() + (1.0 - w_ctc) * (lambda2 * s_l2r + (1.0 - lambda2) * s_r2l));
    }
    let mut best = 0;
    for i in 1..scored.len() {
        let better = combined[i] > combined[best]
            || (combined[i] == combined[best]
                && (scored[i].prefix.len() < scored[best].prefix.len()
                    || (scored[i].prefix.len() == scored[best].prefix.len()
                        && scored[i].prefix < scored[best].prefix)));
        if better {
            best = i;
        }
    }
    Ok(scored[best].clone())
}

/// Mean per-token log-probability of `tokens` (plus eos) under one decoder
/// direction.
pub fn teacher_forced_score(
    model: &CitrinetModel,
    enc: &Tensor,
    enc_valid: &[usize],
    tokens: &[usize],
    dir: Direction,
) -> Result<f64> {
    let mut g = Graph::inference();
    let mut rng = seeded(0, 0);
    let mut ctx = Ctx::eval(&mut g, &mut rng);
    let targets = vec![tokens.to_vec()];
    let (logits, reference) = model.decoder_logits(&mut ctx, enc, enc_valid, &targets, dir)?;
    let lp = ctx.graph.log_softmax(&logits, 2);
    let k = model.vocab.dec_classes();
    let d = lp.data();
    let len = reference.lens[0];
    let mut acc = 0.0;
    for j in 0..len {
        acc += d[j * k + reference.get(0, j)];
    }
    Ok(acc / len as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Character error rate: `edit_distance(hyp, ref) / len(ref)`.
pub fn cer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("CER against an empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

// ── Whole-pipeline decoding ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Decode raw (un-normalized) feature matrices: CMVN with the model's
/// stored stats, encode, CTC beam search, then attention rescoring when the
/// model carries a decoder.
pub fn decode_batch(model: &CitrinetModel, feats_raw: &[Tensor]) -> Result<Vec<DecodeOutcome>> {
    let stats = model.cmvn();
    let normed: Vec<Tensor> = feats_raw.iter().map(|m| cmvn_apply(m, &stats)).collect();
    let batch = FeatureBatch::new(&normed);
    let mut g = Graph::inference();
    let mut rng = seeded(0, 0);
    let mut ctx = Ctx::eval(&mut g, &mut rng);
    let (enc, enc_valid) = model.encode(&mut ctx, &batch.features, &batch.valid_len)?;
    let lp = model.ctc_log_probs(&mut ctx, &enc)?;
    let k = model.vocab.ctc_classes();
    let blank = model.vocab.blank();
    let s = lp.shape().to_vec();
    let (b, t_max) = (s[0], s[1]);
    let lpd = lp.to_vec();
    let enc_shape = enc.shape().to_vec();
    let enc_data = enc.to_vec();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let t_len = enc_valid[bi];
        let rows = &lpd[bi * t_max * k..(bi * t_max + t_len) * k];
        let nbest = ctc_beam_search(rows, t_len, k, blank, model.config.beam_width);
        let chosen = if model.decoder.is_some() && model.config.w_ctc < 1.0 && nbest.len() > 1 {
            let c = enc_shape[1];
            let mut item = vec![0.0; c * t_len];
            for ci in 0..c {
                for ti in 0..t_len {
                    item[ci * t_len + ti] = enc_data[(bi * c + ci) * enc_shape[2] + ti];
                }
            }
            let enc_item = Tensor::new(item, &[1, c, t_len]);
            attention_rescore(
                model,
                &nbest,
                &enc_item,
                &[t_len],
                model.config.w_ctc,
                model.config.lambda2,
            )?
        } else {
            nbest[0].clone()
        };
        out.push(DecodeOutcome {
            score: chosen.score(),
            tokens: chosen.prefix,
        });
    }
    Ok(out)
}
