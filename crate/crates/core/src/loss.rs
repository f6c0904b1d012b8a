//! Training objectives: CTC (log-space forward-backward over the extended
//! label sequence), label-smoothed pointwise KL for the decoder directions,
//! and their linear combination.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{TokenBatch, Vocabulary};
use crate::tensor::Tensor;

pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.3,
            lambda2: 0.7,
            delta: 0.1,
        }
    }
}

// ── CTC ─────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcStatus {
    Ok,
    /// Target needs more frames than available; the utterance contributes an
    /// infinite loss (flagged, never NaN) and a zero gradient.
    TargetTooLong,
}

pub struct CtcOutcome {
    /// Mean over batch of per-utterance losses (scalar tensor on the tape).
    pub loss: Tensor,
    pub statuses: Vec<CtcStatus>,
}

fn ext_label(target: &[usize], s: usize, blank: usize) -> usize {
    if s % 2 == 0 {
        blank
    } else {
        target[(s - 1) / 2]
    }
}

/// Minimum frame count that admits the target: N plus one separator frame
/// per adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Forward (alpha) recursion; `lp` is `[t_len, k]` row-major. Returns the
/// full alpha table and log P(target | input).
fn ctc_alpha(lp: &[f64], t_len: usize, k: usize, target: &[usize], blank: usize) -> (Vec<f64>, f64) {
    let s_len = 2 * target.len() + 1;
    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[target[0]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let lab = ext_label(target, s, blank);
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && lab != blank && lab != ext_label(target, s - 2, blank) {
                acc = logaddexp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp[t * k + lab];
        }
    }
    let mut logp = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        logp = logaddexp(logp, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    (alpha, logp)
}

/// Backward (beta) recursion, emission-inclusive.
fn ctc_beta(lp: &[f64], t_len: usize, k: usize, target: &[usize], blank: usize) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp[(t_len - 1) * k + blank];
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] =
            lp[(t_len - 1) * k + ext_label(target, s_len - 2, blank)];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let lab = ext_label(target, s, blank);
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len {
                let lab2 = ext_label(target, s + 2, blank);
                if lab2 != blank && lab2 != lab {
                    acc = logaddexp(acc, beta[(t + 1) * s_len + s + 2]);
                }
            }
            beta[t * s_len + s] = acc + lp[t * k + lab];
        }
    }
    beta
}

/// Loss for one utterance, or None if the target is inadmissible.
pub fn ctc_loss_single(
    lp: &[f64],
    t_len: usize,
    k: usize,
    target: &[usize],
    blank: usize,
) -> Option<f64> {
    if t_len < ctc_min_frames(target).max(1) {
        return None;
    }
    let (_, logp) = ctc_alpha(lp, t_len, k, target, blank);
    Some(-logp)
}

/// Gradient of `-log P` with respect to the per-frame log-probabilities:
/// `-q_t(k)` where `q` is the state posterior summed per emitted class.
fn ctc_grad_single(lp: &[f64], t_len: usize, k: usize, target: &[usize], blank: usize) -> Vec<f64> {
    let s_len = 2 * target.len() + 1;
    let (alpha, logp) = ctc_alpha(lp, t_len, k, target, blank);
    let beta = ctc_beta(lp, t_len, k, target, blank);
    let mut grad = vec![0.0; t_len * k];
    for t in 0..t_len {
        for s in 0..s_len {
            let lab = ext_label(target, s, blank);
            let mass = alpha[t * s_len + s] + beta[t * s_len + s] - lp[t * k + lab] - logp;
            if mass != LOG_ZERO {
                grad[t * k + lab] -= mass.exp();
            }
        }
    }
    grad
}

/// Batched CTC loss over `log_probs [B, T, K]` using each utterance's first
/// `valid[b]` frames. Reduction: mean of per-utterance losses.
pub fn ctc_loss_batch(
    g: &mut Graph,
    log_probs: &Tensor,
    valid: &[usize],
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<CtcOutcome> {
    let s = log_probs.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: s,
            rhs: vec![],
        });
    }
    let (b, t_max, k) = (s[0], s[1], s[2]);
    assert_eq!(valid.len(), b);
    assert_eq!(targets.len(), b);
    if let Some(&bad) = targets.iter().flatten().find(|&&id| id >= k || id == blank) {
        return Err(Error::Input(format!(
            "ctc target id {bad} invalid for {k} classes with blank {blank}"
        )));
    }
    let lp = log_probs.data();
    let mut total = 0.0;
    let mut statuses = Vec::with_capacity(b);
    for bi in 0..b {
        let t_len = valid[bi];
        let row = &lp[bi * t_max * k..(bi * t_max + t_len) * k];
        match ctc_loss_single(row, t_len, k, &targets[bi], blank) {
            Some(l) => {
                total += l;
                statuses.push(CtcStatus::Ok);
            }
            None => {
                total = f64::INFINITY;
                statuses.push(CtcStatus::TargetTooLong);
            }
        }
    }
    drop(lp);
    let loss = Tensor::scalar(total / b as f64);
    let valid = valid.to_vec();
    let targets = targets.to_vec();
    let lp_t = log_probs.clone();
    let statuses_c = statuses.clone();
    let loss = g.record(&[log_probs], loss, move |gout| {
        let lp = lp_t.data();
        let mut d = vec![0.0; b * t_max * k];
        let scale = gout[0] / b as f64;
        for bi in 0..b {
            if statuses_c[bi] != CtcStatus::Ok {
                continue;
            }
            let t_len = valid[bi];
            let row = &lp[bi * t_max * k..(bi * t_max + t_len) * k];
            let gr = ctc_grad_single(row, t_len, k, &targets[bi], blank);
            for (i, gv) in gr.iter().enumerate() {
                d[bi * t_max * k + i] = gv * scale;
            }
        }
        vec![Some(d)]
    });
    Ok(CtcOutcome { loss, statuses })
}

// ── Label-smoothed KL attention loss ────────────────────────────────────────

/// KL(s || p) for one position given explicit target probabilities and
/// log-predictions; zero-mass target entries contribute nothing.
pub fn kl_divergence(s: &[f64], logp: &[f64]) -> f64 {
    s.iter()
        .zip(logp)
        .filter(|(sv, _)| **sv > 0.0)
        .map(|(sv, lp)| sv * (sv.ln() - lp))
        .sum()
}

/// Pointwise KL between the label-smoothed reference distribution and the
/// decoder prediction. The smoothed target puts `1 - delta` on the reference
/// class and spreads `delta` uniformly over the remaining predictable
/// classes (sos is a logit slot but never receives target mass; pad is not
/// in the head at all). Reduction: per-utterance mean over valid positions,
/// then mean over the batch.
pub fn att_kl_loss(
    g: &mut Graph,
    log_probs: &Tensor,
    reference: &TokenBatch,
    delta: f64,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let s = log_probs.shape().to_vec();
    assert_eq!(s.len(), 3);
    let (b, l_max, k) = (s[0], s[1], s[2]);
    assert_eq!(k, vocab.dec_classes());
    assert_eq!(reference.batch_size(), b);
    assert!(reference.lmax <= l_max);
    if reference.lens.iter().all(|&l| l == 0) {
        return Err(Error::Input("attention loss: all positions padded".into()));
    }
    let spread = (vocab.dec_classes() - 2) as f64; // classes minus sos minus the true one
    let off_mass = if delta > 0.0 { delta / spread } else { 0.0 };
    let sos = vocab.sos();
    let lp = log_probs.data();
    let mut total = 0.0;
    for bi in 0..b {
        let len = reference.lens[bi];
        if len == 0 {
            continue;
        }
        let mut acc = 0.0;
        for li in 0..len {
            let c = reference.get(bi, li);
            debug_assert!(c < k && c != sos);
            let row = &lp[(bi * l_max + li) * k..(bi * l_max + li + 1) * k];
            // Constant entropy term of the smoothed target.
            let mut v = (1.0 - delta) * (1.0 - delta).ln();
            if off_mass > 0.0 {
                v += delta * off_mass.ln();
            }
            // Cross term.
            let mut cross = (1.0 - delta) * row[c];
            if off_mass > 0.0 {
                for (j, lpv) in row.iter().enumerate() {
                    if j != c && j != sos {
                        cross += off_mass * lpv;
                    }
                }
            }
            acc += v - cross;
        }
        total += acc / len as f64;
    }
    drop(lp);
    let loss = Tensor::scalar(total / b as f64);
    let reference = reference.clone();
    Ok(g.record(&[log_probs], loss, move |gout| {
        let mut d = vec![0.0; b * l_max * k];
        for bi in 0..b {
            let len = reference.lens[bi];
            if len == 0 {
                continue;
            }
            let scale = gout[0] / (len as f64 * b as f64);
            for li in 0..len {
                let c = reference.get(bi, li);
                let base = (bi * l_max + li) * k;
                for j in 0..k {
                    if j == sos {
                        continue;
                    }
                    let sj = if j == c { 1.0 - delta } else { off_mass };
                    d[base + j] = -sj * scale;
                }
            }
        }
        vec![Some(d)]
    }))
}

// ── Combined objective ──────────────────────────────────────────────────────

/// `L = l1*CTC + (1-l1)*(l2*ATT_l2r + (1-l2)*ATT_r2l)`. With `lambda1 = 1`
/// (or no attention losses) this is exactly the CTC loss.
pub fn combined_loss(
    g: &mut Graph,
    ctc: &Tensor,
    att_l2r: Option<&Tensor>,
    att_r2l: Option<&Tensor>,
    w: &LossWeights,
) -> Tensor {
    match (att_l2r, att_r2l) {
        (Some(l2r), Some(r2l)) => {
            let a = g.scale(l2r, w.lambda2);
            let b = g.scale(r2l, 1.0 - w.lambda2);
            let att = g.add(&a, &b);
            let att = g.scale(&att, 1.0 - w.lambda1);
            let c = g.scale(ctc, w.lambda1);
            g.add(&c, &att)
        }
        _ => g.scale(ctc, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn log_uniform(t: usize, k: usize) -> Tensor {
        Tensor::new(vec![-(k as f64).ln(); t * k], &[1, t, k])
    }

    #[test]
    fn ctc_single_frame_single_token() {
        let mut g = Graph::new();
        // K = 3 (two tokens + blank at id 2), T = 1, target = (1).
        let lp = Tensor::new(
            vec![(0.2f64).ln(), (0.5f64).ln(), (0.3f64).ln()],
            &[1, 1, 3],
        );
        let out = ctc_loss_batch(&mut g, &lp, &[1], &[vec![1]], 2).unwrap();
        assert!((out.loss.item() - -(0.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_empty_target_is_all_blank_path() {
        let mut g = Graph::new();
        let lp = Tensor::new(
            vec![
                (0.6f64).ln(),
                (0.4f64).ln(),
                (0.3f64).ln(),
                (0.7f64).ln(),
            ],
            &[1, 2, 2],
        );
        let out = ctc_loss_batch(&mut g, &lp, &[2], &[vec![]], 1).unwrap();
        let expect = -((0.4f64).ln() + (0.7f64).ln());
        assert!((out.loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frame_uniform_enumeration() {
        // T=2, uniform 1/2 over {a, blank}, target (a): paths (a,a),(a,-),(-,a)
        // give P = 3/4.
        let mut g = Graph::new();
        let lp = log_uniform(2, 2);
        let out = ctc_loss_batch(&mut g, &lp, &[2], &[vec![0]], 1).unwrap();
        let expect = -(0.75f64).ln();
        assert!((out.loss.item() - expect).abs() < 1e-12);
        assert!((out.loss.item() - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn ctc_inadmissible_target_flagged_infinite() {
        let mut g = Graph::new();
        let lp = log_uniform(2, 3);
        // Target (a, a) needs 3 frames (repeat separator); only 2 available.
        let out = ctc_loss_batch(&mut g, &lp, &[2], &[vec![0, 0]], 2).unwrap();
        assert!(out.loss.item().is_infinite());
        assert!(!out.loss.item().is_nan());
        assert_eq!(out.statuses, vec![CtcStatus::TargetTooLong]);
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let mut rng = crate::rng::seeded(13, 0);
        let (t, k) = (5, 4);
        let blank = 3;
        let target = vec![0usize, 2, 0];
        let logits: Vec<f64> = (0..t * k).map(|_| crate::rng::gaussian(&mut rng)).collect();
        // Differentiate through log-softmax + CTC so the chain is realistic.
        let x = Tensor::new(logits.clone(), &[1, t, k]);
        x.set_requires_grad(true);
        let mut g = Graph::new();
        let lp = g.log_softmax(&x, 2);
        let out = ctc_loss_batch(&mut g, &lp, &[t], &[target.clone()], blank).unwrap();
        g.backward(&out.loss).unwrap();
        let analytic = x.grad_vec();
        let h = 1e-6;
        for i in 0..t * k {
            let eval = |v: f64| {
                let mut pert = logits.clone();
                pert[i] = v;
                let xp = Tensor::new(pert, &[1, t, k]);
                let mut g2 = Graph::inference();
                let lp2 = g2.log_softmax(&xp, 2);
                let o = ctc_loss_batch(&mut g2, &lp2, &[t], &[target.clone()], blank).unwrap();
                o.loss.item()
            };
            let fd = (eval(logits[i] + h) - eval(logits[i] - h)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom <= 1e-6,
                "grad {i}: analytic {} vs fd {}",
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn kl_closed_form_two_class() {
        let s = [0.9, 0.1];
        let logp = [(0.5f64).ln(), (0.5f64).ln()];
        let v = kl_divergence(&s, &logp);
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn kl_zero_when_prediction_matches_smoothed_target() {
        let vocab = Vocabulary::new(4);
        let k = vocab.dec_classes(); // 7
        let delta = 0.1;
        let spread = (k - 2) as f64;
        let reference = TokenBatch::new(&[vec![2usize]], vocab.pad());
        // Build log-probs equal to the smoothed target (sos gets ~0 mass; use
        // a tiny epsilon then renormalize so it stays a distribution).
        let mut p = vec![0.0; k];
        for (j, pv) in p.iter_mut().enumerate() {
            *pv = if j == 2 {
                1.0 - delta
            } else if j == vocab.sos() {
                1e-300
            } else {
                delta / spread
            };
        }
        let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let t = Tensor::new(lp, &[1, 1, k]);
        let mut g = Graph::new();
        let loss = att_kl_loss(&mut g, &t, &reference, delta, &vocab).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_and_delta_zero_is_cross_entropy() {
        let vocab = Vocabulary::new(3);
        let k = vocab.dec_classes();
        let mut rng = crate::rng::seeded(3, 1);
        let logits: Vec<f64> = (0..k).map(|_| crate::rng::gaussian(&mut rng)).collect();
        let x = Tensor::new(logits, &[1, 1, k]);
        let mut g = Graph::new();
        let lp = g.log_softmax(&x, 2);
        let reference = TokenBatch::new(&[vec![1usize]], vocab.pad());
        let loss = att_kl_loss(&mut g, &lp, &reference, 0.0, &vocab).unwrap();
        let expect = -lp.at(1);
        assert!((loss.item() - expect).abs() < 1e-12);
        let smoothed = att_kl_loss(&mut g, &lp, &reference, 0.1, &vocab).unwrap();
        assert!(smoothed.item() >= 0.0);
    }

    #[test]
    fn kl_all_padded_is_error() {
        let vocab = Vocabulary::new(3);
        let k = vocab.dec_classes();
        let t = Tensor::new(vec![-(k as f64).ln(); k], &[1, 1, k]);
        let reference = TokenBatch::new(&[vec![]], vocab.pad());
        let mut g = Graph::new();
        assert!(att_kl_loss(&mut g, &t, &reference, 0.1, &vocab).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        let mut g = Graph::new();
        let ctc = Tensor::scalar(2.0);
        let l2r = Tensor::scalar(1.0);
        let r2l = Tensor::scalar(3.0);
        let w = LossWeights {
            lambda1: 0.3,
            lambda2: 0.7,
            delta: 0.1,
        };
        let l = combined_loss(&mut g, &ctc, Some(&l2r), Some(&r2l), &w);
        assert!((l.item() - 1.72).abs() < 1e-12);
        // lambda1 = 1 degenerates to pure CTC.
        let w1 = LossWeights {
            lambda1: 1.0,
            ..w
        };
        let l = combined_loss(&mut g, &ctc, Some(&l2r), Some(&r2l), &w1);
        assert_eq!(l.item(), 2.0);
        let l = combined_loss(&mut g, &ctc, None, None, &w1);
        assert_eq!(l.item(), 2.0);
        // Boundary weights pick out single attention terms.
        let w0 = LossWeights {
            lambda1: 0.0,
            lambda2: 1.0,
            delta: 0.1,
        };
        let l = combined_loss(&mut g, &ctc, Some(&l2r), Some(&r2l), &w0);
        assert_eq!(l.item(), 1.0);
    }

    #[test]
    fn combined_loss_monotone_in_components() {
        let mut g = Graph::new();
        let w = LossWeights::default();
        let base = {
            let ctc = Tensor::scalar(1.0);
            let a = Tensor::scalar(1.0);
            let b = Tensor::scalar(1.0);
            combined_loss(&mut g, &ctc, Some(&a), Some(&b), &w).item()
        };
        for bump in 0..3 {
            let vals = [
                (1.5, 1.0, 1.0),
                (1.0, 1.5, 1.0),
                (1.0, 1.0, 1.5),
            ][bump];
            let ctc = Tensor::scalar(vals.0);
            let a = Tensor::scalar(vals.1);
            let b = Tensor::scalar(vals.2);
            let l = combined_loss(&mut g, &ctc, Some(&a), Some(&b), &w).item();
            assert!(l >= base);
        }
    }
}
