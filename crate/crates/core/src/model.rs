//! Full model assembly: vocabulary and token batching, the kernel schedule,
//! the encoder (prolog + three mega blocks + epilog), the CTC head, the
//! bidirectional Transformer decoder, and parameter counting.

use crate::blocks::{BlockSpec, JasperBlock};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::features::N_MELS;
use crate::graph::Ctx;
use crate::layers::{Activation, AttentionMask, Conv1dLayer, Ffn, LayerNorm, Linear, Mhsa};
use crate::layers::sinusoidal_positions;
use crate::params::{Init, ParamKind, ParamTable};
use crate::tensor::Tensor;

pub const PROLOG_KERNEL: usize = 11;
pub const EPILOG_KERNEL: usize = 41;

// ── Vocabulary and token batches ────────────────────────────────────────────

/// Fixed token table of `size` ids `0..size`, followed by the special
/// symbols: blank (CTC), sos, eos, pad. The CTC head covers tokens + blank;
/// the decoder head covers everything except pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Vocabulary {
        Vocabulary { size }
    }

    pub fn blank(&self) -> usize {
        self.size
    }

    pub fn sos(&self) -> usize {
        self.size + 1
    }

    pub fn eos(&self) -> usize {
        self.size + 2
    }

    pub fn pad(&self) -> usize {
        self.size + 3
    }

    /// CTC head width: tokens + blank.
    pub fn ctc_classes(&self) -> usize {
        self.size + 1
    }

    /// Decoder head width: tokens + blank + sos + eos (pad never predicted).
    pub fn dec_classes(&self) -> usize {
        self.size + 3
    }

    /// Embedding table rows: every id including pad.
    pub fn total_ids(&self) -> usize {
        self.size + 4
    }

    pub fn is_token(&self, id: usize) -> bool {
        id < self.size
    }
}

/// Padded integer token batch; entries beyond each valid length are pad.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub lmax: usize,
}

impl TokenBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> TokenBatch {
        let b = seqs.len();
        let lmax = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![pad; b * lmax];
        let mut lens = Vec::with_capacity(b);
        for (bi, s) in seqs.iter().enumerate() {
            lens.push(s.len());
            ids[bi * lmax..bi * lmax + s.len()].copy_from_slice(s);
        }
        TokenBatch { ids, lens, lmax }
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn get(&self, b: usize, l: usize) -> usize {
        self.ids[b * self.lmax + l]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    L2r,
    R2l,
}

/// Teacher-forcing I/O for one decoder direction: the input is
/// `(sos, y1..yN)` for l2r and `(sos, yN..y1)` for r2l; the reference is
/// `(y1..yN, eos)` in original order for both.
pub fn decoder_io(
    vocab: &Vocabulary,
    targets: &[Vec<usize>],
    dir: Direction,
) -> (TokenBatch, TokenBatch) {
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|y| {
            let mut seq = Vec::with_capacity(y.len() + 1);
            seq.push(vocab.sos());
            match dir {
                Direction::L2r => seq.extend(y.iter().copied()),
                Direction::R2l => seq.extend(y.iter().rev().copied()),
            }
            seq
        })
        .collect();
    let refs: Vec<Vec<usize>> = targets
        .iter()
        .map(|y| {
            let mut seq: Vec<usize> = y.clone();
            seq.push(vocab.eos());
            seq
        })
        .collect();
    (
        TokenBatch::new(&inputs, vocab.pad()),
        TokenBatch::new(&refs, vocab.pad()),
    )
}

// ── Kernel schedule ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScheduledBlock {
    pub name: String,
    pub spec: BlockSpec,
}

/// Mega-block sizes for a block total: the full 23-block layout has (6,7,8);
/// pruned layouts keep the first `floor(6n/21)` / `floor(7n/21)` / remainder
/// blocks of each mega block.
pub fn mega_counts(total_blocks: usize) -> (usize, usize, usize) {
    let n = total_blocks;
    let m1 = 6 * n / 21;
    let m2 = 7 * n / 21;
    let m3 = n - 2 - m1 - m2;
    (m1, m2, m3)
}

/// Full block layout for a config: prolog (K=11, no residual), three mega
/// blocks with linearly increasing kernels starting at 11/13/25, epilog
/// (K=41, no residual, `epilog_dim` outputs). The first block of each mega
/// block strides by 2. In the Att-C variant every mega and epilog block is
/// attention-enhanced; the prolog keeps the original conv module.
pub fn kernel_schedule(cfg: &ModelConfig) -> Result<Vec<ScheduledBlock>> {
    if !crate::config::ALLOWED_TOTALS.contains(&cfg.total_blocks) {
        return Err(Error::Config(format!(
            "total_blocks {} not in allowed set {:?}",
            cfg.total_blocks,
            crate::config::ALLOWED_TOTALS
        )));
    }
    let c = cfg.channels;
    let enhanced = cfg.variant == Variant::AttC;
    let repeat = if enhanced { 1 } else { 5 };
    let (m1, m2, m3) = mega_counts(cfg.total_blocks);
    let mut out = Vec::with_capacity(cfg.total_blocks);
    out.push(ScheduledBlock {
        name: "prolog".into(),
        spec: BlockSpec {
            in_channels: N_MELS,
            out_channels: c,
            kernel: PROLOG_KERNEL,
            stride: 1,
            repeat: 1,
            has_residual: false,
            attention_enhanced: false,
            se_reduction: cfg.se_reduction,
        },
    });
    for (mega, (count, start)) in [(m1, 11usize), (m2, 13), (m3, 25)].into_iter().enumerate() {
        for j in 0..count {
            out.push(ScheduledBlock {
                name: format!("mega{}.block{}", mega + 1, j),
                spec: BlockSpec {
                    in_channels: c,
                    out_channels: c,
                    kernel: start + 2 * j,
                    stride: if j == 0 { 2 } else { 1 },
                    repeat,
                    has_residual: true,
                    attention_enhanced: enhanced,
                    se_reduction: cfg.se_reduction,
                },
            });
        }
    }
    out.push(ScheduledBlock {
        name: "epilog".into(),
        spec: BlockSpec {
            in_channels: c,
            out_channels: cfg.epilog_dim,
            kernel: EPILOG_KERNEL,
            stride: 1,
            repeat: 1,
            has_residual: false,
            attention_enhanced: enhanced,
            se_reduction: cfg.se_reduction,
        },
    });
    debug_assert_eq!(out.len(), cfg.total_blocks);
    Ok(out)
}

// ── Encoder ─────────────────────────────────────────────────────────────────

pub struct Encoder {
    pub blocks: Vec<(String, JasperBlock)>,
}

impl Encoder {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Encoder> {
        let mut blocks = Vec::new();
        for sb in kernel_schedule(cfg)? {
            let block = JasperBlock::new(
                sb.spec,
                cfg.norm,
                cfg.act,
                cfg.heads,
                cfg.use_ffn,
                cfg.dropout,
                init,
            )?;
            blocks.push((sb.name, block));
        }
        Ok(Encoder { blocks })
    }

    /// `features [B,80,T]` -> `(enc [B,epilog_dim,T'], enc_valid)` with
    /// `T' = T / 2^(#stride-2 blocks)` (ceil at each halving).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        features: &Tensor,
        valid: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        let s = features.shape();
        if s.len() != 3 || s[1] != N_MELS {
            return Err(Error::Input(format!(
                "encoder expects [B,{N_MELS},T] features, got {s:?}"
            )));
        }
        if s[2] == 0 || valid.iter().any(|&v| v == 0) {
            return Err(Error::Input("encoder input has zero frames".into()));
        }
        let mut h = features.clone();
        let mut v = valid.to_vec();
        for (_, block) in &self.blocks {
            let (nh, nv) = block.forward(ctx, &h, &v)?;
            h = nh;
            v = nv;
        }
        Ok((h, v))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        for (bname, block) in &self.blocks {
            block.collect(&format!("{name}.{bname}"), t);
        }
    }
}

// ── Transformer decoder ─────────────────────────────────────────────────────

struct DecoderBlock {
    self_norm: LayerNorm,
    self_attn: Mhsa,
    cross_norm: LayerNorm,
    cross_attn: Mhsa,
    ffn_norm: LayerNorm,
    ffn: Ffn,
}

impl DecoderBlock {
    fn new(d: usize, heads: usize, dropout: f64, init: &mut Init) -> Result<DecoderBlock> {
        Ok(DecoderBlock {
            self_norm: LayerNorm::new(d),
            self_attn: Mhsa::new(d, heads, dropout, init)?,
            cross_norm: LayerNorm::new(d),
            cross_attn: Mhsa::new(d, heads, dropout, init)?,
            ffn_norm: LayerNorm::new(d),
            ffn: Ffn::new(d, 4 * d, Activation::Relu, dropout, init),
        })
    }

    fn collect(&self, name: &str, t: &mut ParamTable) {
        self.self_norm.collect(&format!("{name}.self_norm"), t);
        self.self_attn.collect(&format!("{name}.self_attn"), t);
        self.cross_norm.collect(&format!("{name}.cross_norm"), t);
        self.cross_attn.collect(&format!("{name}.cross_attn"), t);
        self.ffn_norm.collect(&format!("{name}.ffn_norm"), t);
        self.ffn.collect(&format!("{name}.ffn"), t);
    }
}

/// Pre-norm Transformer decoder scoring both text directions with one shared
/// parameter set; the direction lives entirely in the input ordering. Token
/// embeddings are scaled by sqrt(d) and carry fixed sinusoidal positions;
/// the input embedding and output projection are separate matrices.
pub struct TransformerDecoder {
    pub embed: Tensor,
    blocks: Vec<DecoderBlock>,
    final_norm: LayerNorm,
    out: Linear,
    pub d: usize,
    dropout: f64,
}

impl TransformerDecoder {
    fn new(vocab: &Vocabulary, cfg: &ModelConfig, init: &mut Init) -> Result<TransformerDecoder> {
        let d = cfg.decoder_dim;
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for _ in 0..cfg.decoder_blocks {
            blocks.push(DecoderBlock::new(d, cfg.heads, cfg.dropout, init)?);
        }
        Ok(TransformerDecoder {
            embed: init.param(&[vocab.total_ids(), d], (1.0 / d as f64).sqrt()),
            blocks,
            final_norm: LayerNorm::new(d),
            out: Linear::new(d, vocab.dec_classes(), init),
            d,
            dropout: cfg.dropout,
        })
    }

    /// `enc_d [B,T',d]` (already projected), causal self-attention over the
    /// token stream, cross-attention over valid encoder frames. One forward
    /// pass yields logits `[B, L, dec_classes]` for every position.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        enc_d: &Tensor,
        enc_valid: &[usize],
        input: &TokenBatch,
    ) -> Result<Tensor> {
        let b = input.batch_size();
        let l = input.lmax;
        let tk = enc_d.shape()[1];
        let emb = ctx.graph.embedding(&self.embed, &input.ids, b, l)?;
        let emb = ctx.graph.scale(&emb, (self.d as f64).sqrt());
        let pos = sinusoidal_positions(l, self.d);
        let mut h = ctx.graph.add_pos(&emb, pos);
        h = ctx.graph.dropout(ctx.train, ctx.rng, &h, self.dropout);
        let causal = AttentionMask::causal(b, l);
        let cross = AttentionMask::padding(b, l, tk, enc_valid)?;
        for block in &self.blocks {
            let a = block.self_norm.forward(ctx.graph, &h);
            let a = block.self_attn.forward(ctx, &a, &causal)?;
            h = ctx.graph.add(&h, &a);
            let a = block.cross_norm.forward(ctx.graph, &h);
            let a = block.cross_attn.forward_kv(ctx, &a, enc_d, &cross)?;
            h = ctx.graph.add(&h, &a);
            let a = block.ffn_norm.forward(ctx.graph, &h);
            let a = block.ffn.forward(ctx, &a);
            h = ctx.graph.add(&h, &a);
        }
        let h = self.final_norm.forward(ctx.graph, &h);
        Ok(self.out.forward(ctx.graph, &h))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        t.push(format!("{name}.embed"), self.embed.clone(), ParamKind::Trainable);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(&format!("{name}.block{i}"), t);
        }
        self.final_norm.collect(&format!("{name}.final_norm"), t);
        self.out.collect(&format!("{name}.out"), t);
    }
}

// ── Full model ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum InitMode {
    Seeded(u64),
    /// All-zero parameters; only useful for counting and checkpoint loading.
    Zeros,
}

pub struct CitrinetModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    /// Global CMVN statistics travel with the model as buffers.
    pub cmvn_mean: Tensor,
    pub cmvn_var: Tensor,
    pub cmvn_frames: Tensor,
    pub encoder: Encoder,
    pub ctc_head: Conv1dLayer,
    pub enc_proj: Option<Linear>,
    pub decoder: Option<TransformerDecoder>,
}

impl CitrinetModel {
    pub fn build(config: &ModelConfig, mode: InitMode) -> Result<CitrinetModel> {
        config.validate()?;
        let mut init = match mode {
            InitMode::Seeded(seed) => Init::seeded(seed),
            InitMode::Zeros => Init::zeros(),
        };
        let vocab = Vocabulary::new(config.vocab);
        let encoder = Encoder::new(config, &mut init)?;
        let ctc_head = Conv1dLayer::new(config.epilog_dim, vocab.ctc_classes(), 1, 1, 1, &mut init);
        let (enc_proj, decoder) = if config.use_bidecoder {
            let proj = if config.epilog_dim != config.decoder_dim {
                Some(Linear::new(config.epilog_dim, config.decoder_dim, &mut init))
            } else {
                None
            };
            let dec = TransformerDecoder::new(&vocab, config, &mut init)?;
            (proj, Some(dec))
        } else {
            (None, None)
        };
        Ok(CitrinetModel {
            config: config.clone(),
            vocab,
            cmvn_mean: Tensor::zeros(&[N_MELS]),
            cmvn_var: Tensor::full(&[N_MELS], 1.0),
            cmvn_frames: Tensor::zeros(&[1]),
            encoder,
            ctc_head,
            enc_proj,
            decoder,
        })
    }

    pub fn params(&self) -> ParamTable {
        let mut t = ParamTable::new();
        t.push("cmvn.mean".into(), self.cmvn_mean.clone(), ParamKind::Buffer);
        t.push("cmvn.var".into(), self.cmvn_var.clone(), ParamKind::Buffer);
        t.push("cmvn.frames".into(), self.cmvn_frames.clone(), ParamKind::Buffer);
        self.encoder.collect("encoder", &mut t);
        self.ctc_head.collect("ctc_head", &mut t);
        if let Some(proj) = &self.enc_proj {
            proj.collect("enc_proj", &mut t);
        }
        if let Some(dec) = &self.decoder {
            dec.collect("decoder", &mut t);
        }
        t
    }

    pub fn set_cmvn(&self, stats: &crate::features::CmvnStats) {
        self.cmvn_mean.set_data(&stats.mean);
        self.cmvn_var.set_data(&stats.var);
        self.cmvn_frames.set_data(&[stats.frames as f64]);
    }

    pub fn cmvn(&self) -> crate::features::CmvnStats {
        crate::features::CmvnStats {
            mean: self.cmvn_mean.to_vec(),
            var: self.cmvn_var.to_vec(),
            frames: self.cmvn_frames.at(0) as usize,
        }
    }

    pub fn encode(
        &self,
        ctx: &mut Ctx,
        features: &Tensor,
        valid: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        self.encoder.forward(ctx, features, valid)
    }

    /// Per-frame log-probabilities `[B, T', V+1]` from the CTC head.
    pub fn ctc_log_probs(&self, ctx: &mut Ctx, enc: &Tensor) -> Result<Tensor> {
        let logits = self.ctc_head.forward(ctx.graph, enc)?;
        let logits = ctx.graph.transpose12(&logits);
        Ok(ctx.graph.log_softmax(&logits, 2))
    }

    /// Encoder activations projected to the decoder width `[B,T',d]`.
    pub fn project_encoder(&self, ctx: &mut Ctx, enc: &Tensor) -> Tensor {
        let enc_t = ctx.graph.transpose12(enc);
        match &self.enc_proj {
            Some(proj) => proj.forward(ctx.graph, &enc_t),
            None => enc_t,
        }
    }

    /// Teacher-forced decoder logits for one direction plus the positional
    /// reference batch.
    pub fn decoder_logits(
        &self,
        ctx: &mut Ctx,
        enc: &Tensor,
        enc_valid: &[usize],
        targets: &[Vec<usize>],
        dir: Direction,
    ) -> Result<(Tensor, TokenBatch)> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Config("model has no decoder".into()))?;
        for y in targets {
            if let Some(&bad) = y.iter().find(|&&id| !self.vocab.is_token(id)) {
                return Err(Error::Input(format!(
                    "target token id {bad} outside vocabulary of {}",
                    self.vocab.size
                )));
            }
        }
        let (input, reference) = decoder_io(&self.vocab, targets, dir);
        let enc_d = self.project_encoder(ctx, enc);
        let logits = decoder.forward(ctx, &enc_d, enc_valid, &input)?;
        Ok((logits, reference))
    }
}

/// Exact trainable-parameter census for a config.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    let model = CitrinetModel::build(config, InitMode::Zeros)?;
    Ok(model.params().total_trainable())
}

/// Census grouped by top-level component, for reporting.
pub fn params_breakdown(config: &ModelConfig) -> Result<Vec<(String, usize)>> {
    let model = CitrinetModel::build(config, InitMode::Zeros)?;
    let table = model.params();
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, tensor) in table.trainable() {
        let head = match name.split('.').next().unwrap() {
            "encoder" => {
                let mut it = name.split('.');
                it.next();
                format!("encoder.{}", it.next().unwrap_or(""))
            }
            other => other.to_string(),
        };
        match groups.iter_mut().find(|(g, _)| g == &head) {
            Some((_, n)) => *n += tensor.numel(),
            None => groups.push((head, tensor.numel())),
        }
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ceil_div;
    use crate::graph::Graph;
    use crate::rng::seeded;

    fn tiny_att_config() -> ModelConfig {
        let mut cfg = ModelConfig::att_citrinet(16);
        cfg.total_blocks = 3;
        cfg.vocab = 8;
        cfg.decoder_dim = 16;
        cfg.epilog_dim = 24;
        cfg.dropout = 0.0;
        cfg.spec_augment = false;
        cfg
    }

    #[test]
    fn schedule_full_23_block_layout() {
        let cfg = ModelConfig::citrinet(384);
        let sched = kernel_schedule(&cfg).unwrap();
        assert_eq!(sched.len(), 23);
        let kernels = |prefix: &str| -> Vec<usize> {
            sched
                .iter()
                .filter(|b| b.name.starts_with(prefix))
                .map(|b| b.spec.kernel)
                .collect()
        };
        assert_eq!(kernels("mega1"), vec![11, 13, 15, 17, 19, 21]);
        assert_eq!(kernels("mega2"), vec![13, 15, 17, 19, 21, 23, 25]);
        assert_eq!(kernels("mega3"), vec![25, 27, 29, 31, 33, 35, 37, 39]);
        assert_eq!(sched[0].spec.kernel, 11);
        assert_eq!(sched.last().unwrap().spec.kernel, 41);
        assert_eq!(sched.last().unwrap().spec.out_channels, 640);
        let stride2 = sched.iter().filter(|b| b.spec.stride == 2).count();
        assert_eq!(stride2, 3);
        assert!(sched.iter().all(|b| b.spec.repeat == if b.name.contains("mega") { 5 } else { 1 }));
    }

    #[test]
    fn schedule_pruned_13_block_layout() {
        let mut cfg = ModelConfig::att_citrinet(256);
        cfg.total_blocks = 13;
        let sched = kernel_schedule(&cfg).unwrap();
        assert_eq!(sched.len(), 13);
        let counts = mega_counts(13);
        assert_eq!(counts, (3, 4, 4));
        let kernels = |prefix: &str| -> Vec<usize> {
            sched
                .iter()
                .filter(|b| b.name.starts_with(prefix))
                .map(|b| b.spec.kernel)
                .collect()
        };
        assert_eq!(kernels("mega1"), vec![11, 13, 15]);
        assert_eq!(kernels("mega2"), vec![13, 15, 17, 19]);
        assert_eq!(kernels("mega3"), vec![25, 27, 29, 31]);
        // Enhancements everywhere except the prolog.
        assert!(!sched[0].spec.attention_enhanced);
        assert!(sched[1..].iter().all(|b| b.spec.attention_enhanced));
    }

    #[test]
    fn schedule_rejects_disallowed_total() {
        let mut cfg = ModelConfig::citrinet(256);
        cfg.total_blocks = 14;
        assert!(kernel_schedule(&cfg).is_err());
    }

    #[test]
    fn all_standard_totals_have_three_stride2_blocks() {
        for &total in crate::config::ALLOWED_TOTALS.iter().filter(|&&t| t >= 8) {
            let mut cfg = ModelConfig::citrinet(256);
            cfg.total_blocks = total;
            let sched = kernel_schedule(&cfg).unwrap();
            assert_eq!(
                sched.iter().filter(|b| b.spec.stride == 2).count(),
                3,
                "total {total}"
            );
        }
    }

    #[test]
    fn encode_length_contract() {
        let cfg = tiny_att_config();
        let model = CitrinetModel::build(&cfg, InitMode::Seeded(1)).unwrap();
        let mut rng = seeded(0, 0);
        for t in [96usize, 100] {
            let feats = Tensor::zeros(&[1, N_MELS, t]);
            let mut g = Graph::inference();
            let mut ctx = Ctx::eval(&mut g, &mut rng);
            let (enc, valid) = model.encode(&mut ctx, &feats, &[t]).unwrap();
            // 3-block tiny layout has one stride-2 block.
            assert_eq!(enc.shape()[2], ceil_div(t, 2));
            assert_eq!(valid, vec![ceil_div(t, 2)]);
            assert_eq!(enc.shape()[1], cfg.epilog_dim);
        }
        let feats = Tensor::zeros(&[1, N_MELS, 4]);
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(&mut g, &mut rng);
        assert!(model.encode(&mut ctx, &feats, &[0]).is_err());
    }

    #[test]
    fn ctc_head_rows_are_log_probabilities() {
        let cfg = tiny_att_config();
        let model = CitrinetModel::build(&cfg, InitMode::Seeded(2)).unwrap();
        let mut rng = seeded(0, 0);
        let feats = Tensor::new(
            (0..N_MELS * 40).map(|i| (i as f64 * 0.01).sin()).collect(),
            &[1, N_MELS, 40],
        );
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(&mut g, &mut rng);
        let (enc, _) = model.encode(&mut ctx, &feats, &[40]).unwrap();
        let lp = model.ctc_log_probs(&mut ctx, &enc).unwrap();
        assert_eq!(lp.shape(), &[1, 20, cfg.vocab + 1]);
        let d = lp.to_vec();
        for t in 0..20 {
            let s: f64 = (0..cfg.vocab + 1).map(|k| d[t * (cfg.vocab + 1) + k].exp()).sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn ctc_head_zero_weights_uniform() {
        let cfg = tiny_att_config();
        let model = CitrinetModel::build(&cfg, InitMode::Zeros).unwrap();
        let mut rng = seeded(0, 0);
        let feats = Tensor::zeros(&[1, N_MELS, 16]);
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(&mut g, &mut rng);
        let (enc, _) = model.encode(&mut ctx, &feats, &[16]).unwrap();
        let lp = model.ctc_log_probs(&mut ctx, &enc).unwrap();
        let k = cfg.vocab + 1;
        let expect = -(k as f64).ln();
        for v in lp.to_vec() {
            assert!((v - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn ctc_head_param_count_formula() {
        let cfg = ModelConfig::citrinet(384);
        let model = CitrinetModel::build(&cfg, InitMode::Zeros).unwrap();
        let table = model.params();
        let head: usize = table
            .trainable()
            .filter(|(n, _)| n.starts_with("ctc_head"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(head, 640 * 4097 + 4097);
    }

    #[test]
    fn decoder_causal_and_palindrome_properties() {
        let cfg = tiny_att_config();
        let model = CitrinetModel::build(&cfg, InitMode::Seeded(3)).unwrap();
        let mut rng = seeded(0, 0);
        let feats = Tensor::new(
            (0..N_MELS * 32).map(|i| (i as f64 * 0.03).cos()).collect(),
            &[1, N_MELS, 32],
        );
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(&mut g, &mut rng);
        let (enc, ev) = model.encode(&mut ctx, &feats, &[32]).unwrap();

        // Causality: perturbing a later input token leaves earlier logits alone.
        let y1 = vec![vec![1usize, 2, 3, 4]];
        let y2 = vec![vec![1usize, 2, 3, 7]];
        let (l1, _) = model
            .decoder_logits(&mut ctx, &enc, &ev, &y1, Direction::L2r)
            .unwrap();
        let (l2, _) = model
            .decoder_logits(&mut ctx, &enc, &ev, &y2, Direction::L2r)
            .unwrap();
        let k = model.vocab.dec_classes();
        let (a, b) = (l1.to_vec(), l2.to_vec());
        // Input streams are (sos,1,2,3,*): positions 0..=3 see identical
        // prefixes, so their logits agree; position 4 differs.
        for pos in 0..4 {
            for j in 0..k {
                assert_eq!(a[pos * k + j], b[pos * k + j]);
            }
        }
        assert!((0..k).any(|j| a[4 * k + j] != b[4 * k + j]));

        // Palindrome target: reversed input equals forward input, and the
        // directions share parameters, so logits match exactly.
        let pal = vec![vec![2usize, 5, 2]];
        let (fl, fr) = model
            .decoder_logits(&mut ctx, &enc, &ev, &pal, Direction::L2r)
            .unwrap();
        let (rl, rr) = model
            .decoder_logits(&mut ctx, &enc, &ev, &pal, Direction::R2l)
            .unwrap();
        assert_eq!(fl.to_vec(), rl.to_vec());
        assert_eq!(fr.ids, rr.ids);
    }

    #[test]
    fn decoder_rejects_out_of_range_tokens() {
        let cfg = tiny_att_config();
        let model = CitrinetModel::build(&cfg, InitMode::Seeded(4)).unwrap();
        let mut rng = seeded(0, 0);
        let feats = Tensor::zeros(&[1, N_MELS, 16]);
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval(&mut g, &mut rng);
        let (enc, ev) = model.encode(&mut ctx, &feats, &[16]).unwrap();
        let bad = vec![vec![cfg.vocab + 1]];
        assert!(matches!(
            model.decoder_logits(&mut ctx, &enc, &ev, &bad, Direction::L2r),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn c_variant_allocates_no_decoder() {
        let mut cfg = ModelConfig::citrinet(16);
        cfg.total_blocks = 3;
        cfg.vocab = 8;
        cfg.epilog_dim = 24;
        let model = CitrinetModel::build(&cfg, InitMode::Zeros).unwrap();
        assert!(model.decoder.is_none());
        assert!(model.enc_proj.is_none());
        let table = model.params();
        assert!(table.trainable().all(|(n, _)| !n.starts_with("decoder")));
    }

    #[test]
    fn toy_census_matches_hand_count() {
        // Hand census for att-c, C=8, V=4, 3 blocks, d=8, epilog 16, h=8:
        //   prolog: dw 80*11+80=960, pw 8*80+8=648, bn 16, SE 8+1+8+8=25 -> 1649
        //   mega2.block0: ffn_norm 16, ffn 256+32+256+8=552, attn_norm 16,
        //     attn 4*(64+8)=288, dw 8*13+8=112, pw 64+8=72, norm 16, SE 25,
        //     res 64+8+16=88 -> 1185
        //   epilog: 16+552+16+288 + dw 8*41+8=336 + pw 16*8+16=144 + norm 32
        //     + SE 32+2+32+16=82 -> 1466
        //   ctc head: 5*16+5 = 85
        //   enc_proj 16->8: 128+8 = 136
        //   decoder: embed 8*8=64, 3 blocks of (16+288+16+288+16+552)=1176,
        //     final_norm 16, out 8*7+7=63 -> 3671
        //   total = 8192
        let mut cfg = ModelConfig::att_citrinet(8);
        cfg.total_blocks = 3;
        cfg.vocab = 4;
        cfg.decoder_dim = 8;
        cfg.epilog_dim = 16;
        assert_eq!(count_params(&cfg).unwrap(), 8192);
    }
}
