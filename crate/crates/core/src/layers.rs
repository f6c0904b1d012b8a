//! Reusable layers: linear, conv wrapper, norms, activations, feed-forward
//! and multi-head attention, plus the attention mask builder.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph};
use crate::ops_norm::{BN_EPS, LN_EPS};
use crate::params::{Init, ParamKind, ParamTable};
use crate::tensor::Tensor;

/// Additive mask value for forbidden attention links. Large negative finite
/// so max-subtracted softmax stays NaN-free.
pub const ATTN_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: &Tensor) -> Tensor {
        match self {
            Activation::Swish => g.swish(x),
            Activation::Relu => g.relu(x),
        }
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(din: usize, dout: usize, init: &mut Init) -> Linear {
        Linear {
            weight: init.param(&[din, dout], (1.0 / din as f64).sqrt()),
            bias: Tensor::zeros_param(&[dout]),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Linear {
        Linear {
            weight: Tensor::zeros_param(&[din, dout]),
            bias: Tensor::zeros_param(&[dout]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Tensor {
        g.linear(x, &self.weight, Some(&self.bias))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        t.push(format!("{name}.weight"), self.weight.clone(), ParamKind::Trainable);
        t.push(format!("{name}.bias"), self.bias.clone(), ParamKind::Trainable);
    }
}

pub struct Conv1dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub groups: usize,
}

impl Conv1dLayer {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: &mut Init,
    ) -> Conv1dLayer {
        let fan_in = (cin / groups) * kernel;
        Conv1dLayer {
            weight: init.param(
                &[cout, cin / groups, kernel],
                (1.0 / fan_in as f64).sqrt(),
            ),
            bias: Tensor::zeros_param(&[cout]),
            stride,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        g.conv1d(x, &self.weight, Some(&self.bias), self.stride, self.groups)
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        t.push(format!("{name}.weight"), self.weight.clone(), ParamKind::Trainable);
        t.push(format!("{name}.bias"), self.bias.clone(), ParamKind::Trainable);
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::full_param(&[dim], 1.0),
            beta: Tensor::zeros_param(&[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Tensor {
        g.layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        t.push(format!("{name}.gamma"), self.gamma.clone(), ParamKind::Trainable);
        t.push(format!("{name}.beta"), self.beta.clone(), ParamKind::Trainable);
    }
}

pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> BatchNorm1d {
        BatchNorm1d {
            gamma: Tensor::full_param(&[dim], 1.0),
            beta: Tensor::zeros_param(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<Tensor> {
        ctx.graph.batch_norm1d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            valid,
            ctx.train,
            ctx.update_stats,
            BN_EPS,
        )
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        t.push(format!("{name}.gamma"), self.gamma.clone(), ParamKind::Trainable);
        t.push(format!("{name}.beta"), self.beta.clone(), ParamKind::Trainable);
        t.push(
            format!("{name}.running_mean"),
            self.running_mean.clone(),
            ParamKind::Buffer,
        );
        t.push(
            format!("{name}.running_var"),
            self.running_var.clone(),
            ParamKind::Buffer,
        );
    }
}

// ── Attention masks ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    AntiCausal,
    Padding,
}

/// Additive attention mask `[B, Tq, Tk]` (0 = allowed, `ATTN_NEG` = blocked).
/// Construction rejects any query row with zero allowed keys.
pub struct AttentionMask {
    pub kind: MaskKind,
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    data: Option<Rc<Vec<f64>>>,
}

impl AttentionMask {
    pub fn none(b: usize, tq: usize, tk: usize) -> AttentionMask {
        AttentionMask {
            kind: MaskKind::None,
            b,
            tq,
            tk,
            data: None,
        }
    }

    /// Query i may attend to keys j <= i.
    pub fn causal(b: usize, len: usize) -> AttentionMask {
        let mut data = vec![0.0; b * len * len];
        for bi in 0..b {
            for i in 0..len {
                for j in (i + 1)..len {
                    data[(bi * len + i) * len + j] = ATTN_NEG;
                }
            }
        }
        AttentionMask {
            kind: MaskKind::Causal,
            b,
            tq: len,
            tk: len,
            data: Some(Rc::new(data)),
        }
    }

    /// Query i may attend to keys j >= i.
    pub fn anti_causal(b: usize, len: usize) -> AttentionMask {
        let mut data = vec![0.0; b * len * len];
        for bi in 0..b {
            for i in 0..len {
                for j in 0..i {
                    data[(bi * len + i) * len + j] = ATTN_NEG;
                }
            }
        }
        AttentionMask {
            kind: MaskKind::AntiCausal,
            b,
            tq: len,
            tk: len,
            data: Some(Rc::new(data)),
        }
    }

    /// Keys at or beyond `key_valid[b]` are blocked for every query.
    pub fn padding(b: usize, tq: usize, tk: usize, key_valid: &[usize]) -> Result<AttentionMask> {
        assert_eq!(key_valid.len(), b);
        if key_valid.iter().any(|&v| v == 0) {
            return Err(Error::Contract(
                "attention mask leaves a query row with zero allowed keys".into(),
            ));
        }
        let mut data = vec![0.0; b * tq * tk];
        for bi in 0..b {
            for i in 0..tq {
                for j in key_valid[bi]..tk {
                    data[(bi * tq + i) * tk + j] = ATTN_NEG;
                }
            }
        }
        Ok(AttentionMask {
            kind: MaskKind::Padding,
            b,
            tq,
            tk,
            data: Some(Rc::new(data)),
        })
    }

    pub(crate) fn apply(&self, g: &mut Graph, scores: &Tensor, heads: usize) -> Tensor {
        match &self.data {
            None => scores.clone(),
            Some(d) => g.add_attn_mask(scores, d.clone(), heads),
        }
    }
}

// ── Feed-forward module ─────────────────────────────────────────────────────

/// Position-wise two-layer network `d -> hidden -> d` with an activation
/// between and dropout after each linear.
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
    pub act: Activation,
    pub dropout: f64,
}

impl Ffn {
    pub fn new(d: usize, hidden: usize, act: Activation, dropout: f64, init: &mut Init) -> Ffn {
        Ffn {
            lin1: Linear::new(d, hidden, init),
            lin2: Linear::new(hidden, d, init),
            act,
            dropout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor) -> Tensor {
        let h = self.lin1.forward(ctx.graph, x);
        let h = self.act.apply(ctx.graph, &h);
        let h = ctx.graph.dropout(ctx.train, ctx.rng, &h, self.dropout);
        let h = self.lin2.forward(ctx.graph, &h);
        ctx.graph.dropout(ctx.train, ctx.rng, &h, self.dropout)
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        self.lin1.collect(&format!("{name}.lin1"), t);
        self.lin2.collect(&format!("{name}.lin2"), t);
    }
}

// ── Multi-head attention ────────────────────────────────────────────────────

/// Scaled dot-product multi-head attention with Q,K,V,O projections. Also
/// serves cross-attention by sourcing keys/values from a second sequence.
/// Dropout is applied on the module output only.
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl Mhsa {
    pub fn new(d: usize, heads: usize, dropout: f64, init: &mut Init) -> Result<Mhsa> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Mhsa {
            q: Linear::new(d, d, init),
            k: Linear::new(d, d, init),
            v: Linear::new(d, d, init),
            o: Linear::new(d, d, init),
            heads,
            dropout,
        })
    }

    /// Self-attention over `x [B,T,d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
        self.forward_kv(ctx, x, x, mask)
    }

    /// Cross-attention: queries from `q_seq [B,Tq,d]`, keys/values from
    /// `kv_seq [B,Tk,d]`.
    pub fn forward_kv(
        &self,
        ctx: &mut Ctx,
        q_seq: &Tensor,
        kv_seq: &Tensor,
        mask: &AttentionMask,
    ) -> Result<Tensor> {
        let d = q_seq.shape()[2];
        let dk = d / self.heads;
        let q = self.q.forward(ctx.graph, q_seq);
        let k = self.k.forward(ctx.graph, kv_seq);
        let v = self.v.forward(ctx.graph, kv_seq);
        let qh = ctx.graph.split_heads(&q, self.heads);
        let kh = ctx.graph.split_heads(&k, self.heads);
        let vh = ctx.graph.split_heads(&v, self.heads);
        let scores = ctx.graph.bmm_nt(&qh, &kh)?;
        let scores = ctx.graph.scale(&scores, 1.0 / (dk as f64).sqrt());
        let scores = mask.apply(ctx.graph, &scores, self.heads);
        let attn = ctx.graph.softmax(&scores, 2);
        let gathered = ctx.graph.bmm_nn(&attn, &vh)?;
        let merged = ctx.graph.merge_heads(&gathered, self.heads);
        let out = self.o.forward(ctx.graph, &merged);
        Ok(ctx.graph.dropout(ctx.train, ctx.rng, &out, self.dropout))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        self.q.collect(&format!("{name}.q"), t);
        self.k.collect(&format!("{name}.k"), t);
        self.v.collect(&format!("{name}.v"), t);
        self.o.collect(&format!("{name}.o"), t);
    }
}

/// Sinusoidal positional encodings `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Rc<Vec<f64>> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                pe[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    Rc::new(pe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Rng};

    fn eval_ctx<'a>(g: &'a mut Graph, rng: &'a mut Rng) -> Ctx<'a> {
        Ctx::eval(g, rng)
    }

    #[test]
    fn swish_values() {
        let mut g = Graph::new();
        let x = Tensor::new(vec![0.0, 1.0, 20.0], &[3]);
        let y = g.swish(&x);
        assert_eq!(y.at(0), 0.0);
        let e = std::f64::consts::E;
        let expect1 = e / (1.0 + e); // 1 * sigmoid(1)
        assert!((y.at(1) - expect1).abs() < 1e-12);
        assert!((y.at(2) - 20.0).abs() < 1e-7);
    }

    #[test]
    fn ffn_zero_weights_give_zero_output() {
        let mut g = Graph::new();
        let mut rng = seeded(0, 0);
        let ffn = Ffn {
            lin1: Linear::zeros(3, 12),
            lin2: Linear::zeros(12, 3),
            act: Activation::Swish,
            dropout: 0.0,
        };
        let x = Tensor::new(vec![1.0, -2.0, 3.0], &[1, 1, 3]);
        let mut ctx = eval_ctx(&mut g, &mut rng);
        let y = ffn.forward(&mut ctx, &x);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_hand_one_dim_case() {
        // w1=2, w2=3, no bias, x=1 -> 3*swish(2) = 6*sigmoid(2)
        let mut g = Graph::new();
        let mut rng = seeded(0, 0);
        let ffn = Ffn {
            lin1: Linear {
                weight: Tensor::new(vec![2.0], &[1, 1]),
                bias: Tensor::zeros_param(&[1]),
            },
            lin2: Linear {
                weight: Tensor::new(vec![3.0], &[1, 1]),
                bias: Tensor::zeros_param(&[1]),
            },
            act: Activation::Swish,
            dropout: 0.0,
        };
        let x = Tensor::new(vec![1.0], &[1, 1, 1]);
        let mut ctx = eval_ctx(&mut g, &mut rng);
        let y = ffn.forward(&mut ctx, &x);
        let e2 = (2.0f64).exp();
        let expect = 6.0 * e2 / (1.0 + e2);
        assert!((y.at(0) - expect).abs() < 1e-12);
        assert!((y.at(0) - 5.2847).abs() < 1e-4);
    }

    #[test]
    fn ffn_eval_mode_deterministic() {
        let mut g = Graph::new();
        let mut init = Init::seeded(3);
        let ffn = Ffn::new(4, 16, Activation::Swish, 0.5, &mut init);
        let x = Tensor::new((0..8).map(|i| i as f64 * 0.3).collect(), &[1, 2, 4]);
        let mut r1 = seeded(1, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r1);
        let a = ffn.forward(&mut ctx, &x);
        let mut g2 = Graph::new();
        let mut r2 = seeded(99, 7);
        let mut ctx2 = Ctx::eval(&mut g2, &mut r2);
        let b = ffn.forward(&mut ctx2, &x);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn mhsa_single_key_passes_value_through() {
        let mut g = Graph::new();
        let mut init = Init::seeded(5);
        let attn = Mhsa::new(8, 2, 0.0, &mut init).unwrap();
        let x = Tensor::new((0..8).map(|i| (i as f64 * 0.37).sin()).collect(), &[1, 1, 8]);
        let mask = AttentionMask::none(1, 1, 1);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward(&mut ctx, &x, &mask).unwrap();
        // With one key the attention weights are exactly 1: output = O(V(x)).
        let v = attn.v.forward(ctx.graph, &x);
        let expect = attn.o.forward(ctx.graph, &v);
        for (a, b) in y.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_zero_query_gives_uniform_attention() {
        let mut g = Graph::new();
        let mut init = Init::seeded(6);
        let mut attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        attn.q = Linear::zeros(4, 4);
        let t = 5;
        let x = Tensor::new((0..t * 4).map(|i| (i as f64 * 0.21).cos()).collect(), &[1, t, 4]);
        let mask = AttentionMask::none(1, t, t);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward(&mut ctx, &x, &mask).unwrap();
        // Uniform attention means every position sees the mean of V rows.
        let v = attn.v.forward(ctx.graph, &x);
        let vd = v.to_vec();
        let mut meanv = vec![0.0; 4];
        for ti in 0..t {
            for j in 0..4 {
                meanv[j] += vd[ti * 4 + j] / t as f64;
            }
        }
        let mv = Tensor::new(meanv, &[1, 1, 4]);
        let expect = attn.o.forward(ctx.graph, &mv);
        let yd = y.to_vec();
        for ti in 0..t {
            for j in 0..4 {
                assert!((yd[ti * 4 + j] - expect.at(j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_permutation_equivariant_without_positions() {
        let mut g = Graph::new();
        let mut init = Init::seeded(7);
        let attn = Mhsa::new(6, 3, 0.0, &mut init).unwrap();
        let t = 4;
        let xd: Vec<f64> = (0..t * 6).map(|i| (i as f64 * 0.13).sin()).collect();
        let x = Tensor::new(xd.clone(), &[1, t, 6]);
        let perm = [2usize, 0, 3, 1];
        let mut pxd = vec![0.0; t * 6];
        for (i, &p) in perm.iter().enumerate() {
            pxd[i * 6..(i + 1) * 6].copy_from_slice(&xd[p * 6..(p + 1) * 6]);
        }
        let px = Tensor::new(pxd, &[1, t, 6]);
        let mask = AttentionMask::none(1, t, t);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward(&mut ctx, &x, &mask).unwrap().to_vec();
        let py = attn.forward(&mut ctx, &px, &mask).unwrap().to_vec();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!((py[i * 6 + j] - y[p * 6 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_rejects_bad_head_count() {
        let mut init = Init::seeded(0);
        assert!(matches!(Mhsa::new(6, 4, 0.0, &mut init), Err(Error::Config(_))));
    }

    #[test]
    fn fully_masked_row_is_rejected_at_construction() {
        assert!(AttentionMask::padding(1, 3, 4, &[0]).is_err());
        assert!(AttentionMask::padding(1, 3, 4, &[2]).is_ok());
    }

    #[test]
    fn causal_mask_blocks_future_inputs() {
        let mut g = Graph::new();
        let mut init = Init::seeded(8);
        let attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        let t = 5;
        let xd: Vec<f64> = (0..t * 4).map(|i| (i as f64 * 0.31).sin()).collect();
        let x = Tensor::new(xd.clone(), &[1, t, 4]);
        let mask = AttentionMask::causal(1, t);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward(&mut ctx, &x, &mask).unwrap().to_vec();
        // Perturb the last position; outputs before it must be unchanged.
        let mut xd2 = xd.clone();
        for j in 0..4 {
            xd2[(t - 1) * 4 + j] += 3.0;
        }
        let x2 = Tensor::new(xd2, &[1, t, 4]);
        let y2 = attn.forward(&mut ctx, &x2, &mask).unwrap().to_vec();
        for ti in 0..t - 1 {
            for j in 0..4 {
                assert!((y[ti * 4 + j] - y2[ti * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anti_causal_mask_blocks_past_inputs() {
        let mut g = Graph::new();
        let mut init = Init::seeded(9);
        let attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        let t = 5;
        let xd: Vec<f64> = (0..t * 4).map(|i| (i as f64 * 0.17).cos()).collect();
        let x = Tensor::new(xd.clone(), &[1, t, 4]);
        let mask = AttentionMask::anti_causal(1, t);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward(&mut ctx, &x, &mask).unwrap().to_vec();
        let mut xd2 = xd.clone();
        for j in 0..4 {
            xd2[j] += 3.0; // perturb the first position
        }
        let x2 = Tensor::new(xd2, &[1, t, 4]);
        let y2 = attn.forward(&mut ctx, &x2, &mask).unwrap().to_vec();
        for ti in 1..t {
            for j in 0..4 {
                assert!((y[ti * 4 + j] - y2[ti * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_single_encoder_frame() {
        let mut g = Graph::new();
        let mut init = Init::seeded(10);
        let attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        let q = Tensor::new((0..3 * 4).map(|i| (i as f64 * 0.29).sin()).collect(), &[1, 3, 4]);
        let kv = Tensor::new(vec![0.4, -0.2, 0.9, 0.1], &[1, 1, 4]);
        let mask = AttentionMask::none(1, 3, 1);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let y = attn.forward_kv(&mut ctx, &q, &kv, &mask).unwrap();
        // Every query fully attends to the single frame: rows identical.
        let yd = y.to_vec();
        for ti in 1..3 {
            for j in 0..4 {
                assert!((yd[ti * 4 + j] - yd[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_ignores_padded_keys() {
        let mut g = Graph::new();
        let mut init = Init::seeded(11);
        let attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        let q = Tensor::new((0..2 * 4).map(|i| (i as f64 * 0.11).sin()).collect(), &[1, 2, 4]);
        let mut kvd: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.07).cos()).collect();
        let kv1 = Tensor::new(kvd.clone(), &[1, 5, 4]);
        // Perturb pad frames (beyond valid = 3).
        for t in 3..5 {
            for j in 0..4 {
                kvd[t * 4 + j] = 99.0;
            }
        }
        let kv2 = Tensor::new(kvd, &[1, 5, 4]);
        let mask = AttentionMask::padding(1, 2, 5, &[3]).unwrap();
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let a = attn.forward_kv(&mut ctx, &q, &kv1, &mask).unwrap();
        let b = attn.forward_kv(&mut ctx, &q, &kv2, &mask).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_on_self_equals_mhsa() {
        let mut g = Graph::new();
        let mut init = Init::seeded(12);
        let attn = Mhsa::new(4, 2, 0.0, &mut init).unwrap();
        let x = Tensor::new((0..3 * 4).map(|i| (i as f64 * 0.23).sin()).collect(), &[1, 3, 4]);
        let mask = AttentionMask::none(1, 3, 3);
        let mut r = seeded(0, 0);
        let mut ctx = Ctx::eval(&mut g, &mut r);
        let a = attn.forward(&mut ctx, &x, &mask).unwrap();
        let b = attn.forward_kv(&mut ctx, &x, &x, &mask).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn attention_weights_sum_to_one_over_allowed_keys() {
        let mut g = Graph::new();
        let t = 6;
        let scores = Tensor::new((0..t * t).map(|i| (i as f64 * 0.43).sin()).collect(), &[1, t, t]);
        let mask = AttentionMask::padding(1, t, t, &[4]).unwrap();
        let masked = mask.apply(&mut g, &scores, 1);
        let w = g.softmax(&masked, 2);
        let wd = w.to_vec();
        for i in 0..t {
            let s: f64 = (0..t).map(|j| wd[i * t + j]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
            for j in 4..t {
                assert!(wd[i * t + j] == 0.0);
            }
        }
    }
}
