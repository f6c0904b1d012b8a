//! Citrinet building blocks: squeeze-and-excitation gating, the residual
//! path, the original repeated separable-conv module, its FFN+MHSA-enhanced
//! variant, and the Jasper block combining them.

use crate::error::{Error, Result};
use crate::graph::Ctx;
use crate::layers::{
    Activation, AttentionMask, BatchNorm1d, Conv1dLayer, Ffn, LayerNorm, Linear, Mhsa,
};
use crate::params::{Init, ParamTable};
use crate::tensor::Tensor;

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub repeat: usize,
    pub has_residual: bool,
    pub attention_enhanced: bool,
    pub se_reduction: usize,
}

impl BlockSpec {
    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("block kernel {} must be odd", self.kernel)));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("block stride {} must be 1 or 2", self.stride)));
        }
        if !(self.repeat == 1 || self.repeat == 5) {
            return Err(Error::Config(format!("block repeat {} must be 1 or 5", self.repeat)));
        }
        if self.attention_enhanced && self.repeat != 1 {
            return Err(Error::Config("attention-enhanced blocks use repeat 1".into()));
        }
        if self.out_channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by SE reduction {}",
                self.out_channels, self.se_reduction
            )));
        }
        if self.attention_enhanced && self.in_channels % heads != 0 {
            return Err(Error::Config(format!(
                "enhanced block width {} not divisible by {} attention heads",
                self.in_channels, heads
            )));
        }
        Ok(())
    }
}

/// Channel normalization over `[B,C,T]`, selectable between batch norm and
/// layer norm (the latter normalizes over C at each time step).
pub enum ChannelNorm {
    Batch(BatchNorm1d),
    Layer(LayerNorm),
}

impl ChannelNorm {
    pub fn new(kind: NormKind, dim: usize) -> ChannelNorm {
        match kind {
            NormKind::Batch => ChannelNorm::Batch(BatchNorm1d::new(dim)),
            NormKind::Layer => ChannelNorm::Layer(LayerNorm::new(dim)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<Tensor> {
        match self {
            ChannelNorm::Batch(bn) => bn.forward(ctx, x, valid),
            ChannelNorm::Layer(ln) => {
                let xt = ctx.graph.transpose12(x);
                let y = ln.forward(ctx.graph, &xt);
                Ok(ctx.graph.transpose12(&y))
            }
        }
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        match self {
            ChannelNorm::Batch(bn) => bn.collect(name, t),
            ChannelNorm::Layer(ln) => ln.collect(name, t),
        }
    }
}

// ── SE module ───────────────────────────────────────────────────────────────

/// Squeeze-and-excitation: mean-pool over valid frames, bottleneck
/// `C -> C/8 -> C`, sigmoid gates in (0,1).
pub struct SeModule {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl SeModule {
    pub fn new(channels: usize, reduction: usize, init: &mut Init) -> SeModule {
        let hidden = channels / reduction;
        SeModule {
            lin1: Linear::new(channels, hidden, init),
            lin2: Linear::new(hidden, channels, init),
        }
    }

    /// Gates `[B,C,1]` for an activation map `[B,C,T]`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let (b, c) = (s[0], s[1]);
        let pooled = ctx.graph.mean_time(x, valid)?;
        let flat = ctx.graph.reshape(&pooled, &[b, c]);
        let h = self.lin1.forward(ctx.graph, &flat);
        let h = ctx.graph.relu(&h);
        let h = self.lin2.forward(ctx.graph, &h);
        let gates = ctx.graph.sigmoid(&h);
        Ok(ctx.graph.reshape(&gates, &[b, c, 1]))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        self.lin1.collect(&format!("{name}.lin1"), t);
        self.lin2.collect(&format!("{name}.lin2"), t);
    }
}

// ── Res module ──────────────────────────────────────────────────────────────

/// Residual path: 1x1 conv (stride-matched to the main path) + batch norm.
pub struct ResModule {
    pub pw: Conv1dLayer,
    pub norm: BatchNorm1d,
}

impl ResModule {
    pub fn new(cin: usize, cout: usize, stride: usize, init: &mut Init) -> ResModule {
        ResModule {
            pw: Conv1dLayer::new(cin, cout, 1, stride, 1, init),
            norm: BatchNorm1d::new(cout),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid_out: &[usize]) -> Result<Tensor> {
        let y = self.pw.forward(ctx.graph, x)?;
        self.norm.forward(ctx, &y, valid_out)
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        self.pw.collect(&format!("{name}.pw"), t);
        self.norm.collect(&format!("{name}.norm"), t);
    }
}

// ── Original conv module (repeat 5) ─────────────────────────────────────────

struct SepConvRep {
    dw: Conv1dLayer,
    pw: Conv1dLayer,
    norm: ChannelNorm,
}

/// Repeats of [depthwise K-conv -> pointwise 1x1 -> norm -> act -> dropout];
/// the final repeat omits activation and dropout, stride applies to the first
/// depthwise conv only.
pub struct ConvModule {
    reps: Vec<SepConvRep>,
    act: Activation,
    dropout: f64,
    stride: usize,
}

impl ConvModule {
    pub fn new(spec: &BlockSpec, norm: NormKind, act: Activation, dropout: f64, init: &mut Init) -> ConvModule {
        let mut reps = Vec::with_capacity(spec.repeat);
        for r in 0..spec.repeat {
            let cin = if r == 0 { spec.in_channels } else { spec.out_channels };
            let stride = if r == 0 { spec.stride } else { 1 };
            reps.push(SepConvRep {
                dw: Conv1dLayer::new(cin, cin, spec.kernel, stride, cin, init),
                pw: Conv1dLayer::new(cin, spec.out_channels, 1, 1, 1, init),
                norm: ChannelNorm::new(norm, spec.out_channels),
            });
        }
        ConvModule {
            reps,
            act,
            dropout,
            stride: spec.stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let valid_out: Vec<usize> = valid.iter().map(|&v| ceil_div(v, self.stride)).collect();
        let mut h = x.clone();
        let n = self.reps.len();
        for (r, rep) in self.reps.iter().enumerate() {
            h = rep.dw.forward(ctx.graph, &h)?;
            h = rep.pw.forward(ctx.graph, &h)?;
            h = rep.norm.forward(ctx, &h, &valid_out)?;
            if r + 1 < n {
                h = self.act.apply(ctx.graph, &h);
                h = ctx.graph.dropout(ctx.train, ctx.rng, &h, self.dropout);
            }
            h = ctx.graph.mask_time(&h, &valid_out, 2);
        }
        Ok((h, valid_out))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        for (r, rep) in self.reps.iter().enumerate() {
            rep.dw.collect(&format!("{name}.rep{r}.dw"), t);
            rep.pw.collect(&format!("{name}.rep{r}.pw"), t);
            rep.norm.collect(&format!("{name}.rep{r}.norm"), t);
        }
    }
}

// ── Attention-enhanced conv module (repeat 1) ───────────────────────────────

/// Pre-norm FFN and MHSA sublayers with residual adds, then a single
/// depthwise/pointwise conv pair with norm, activation and dropout. The
/// attention runs at the block's input width over the full (pre-stride)
/// sequence.
pub struct AttConvModule {
    ffn: Option<(LayerNorm, Ffn)>,
    attn_norm: LayerNorm,
    attn: Mhsa,
    dw: Conv1dLayer,
    pw: Conv1dLayer,
    norm: ChannelNorm,
    act: Activation,
    dropout: f64,
    stride: usize,
}

impl AttConvModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &BlockSpec,
        norm: NormKind,
        act: Activation,
        heads: usize,
        use_ffn: bool,
        dropout: f64,
        init: &mut Init,
    ) -> Result<AttConvModule> {
        let cin = spec.in_channels;
        let ffn = if use_ffn {
            Some((
                LayerNorm::new(cin),
                Ffn::new(cin, 4 * cin, act, dropout, init),
            ))
        } else {
            None
        };
        Ok(AttConvModule {
            ffn,
            attn_norm: LayerNorm::new(cin),
            attn: Mhsa::new(cin, heads, dropout, init)?,
            dw: Conv1dLayer::new(cin, cin, spec.kernel, spec.stride, cin, init),
            pw: Conv1dLayer::new(cin, spec.out_channels, 1, 1, 1, init),
            norm: ChannelNorm::new(norm, spec.out_channels),
            act,
            dropout,
            stride: spec.stride,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = x.shape().to_vec();
        let (b, t) = (s[0], s[2]);
        let mut xt = ctx.graph.transpose12(x); // [B,T,Cin]
        if let Some((norm, ffn)) = &self.ffn {
            let h = norm.forward(ctx.graph, &xt);
            let h = ffn.forward(ctx, &h);
            xt = ctx.graph.add(&xt, &h);
            xt = ctx.graph.mask_time(&xt, valid, 1);
        }
        let mask = AttentionMask::padding(b, t, t, valid)?;
        let h = self.attn_norm.forward(ctx.graph, &xt);
        let h = self.attn.forward(ctx, &h, &mask)?;
        xt = ctx.graph.add(&xt, &h);
        xt = ctx.graph.mask_time(&xt, valid, 1);
        let x = ctx.graph.transpose12(&xt);
        let valid_out: Vec<usize> = valid.iter().map(|&v| ceil_div(v, self.stride)).collect();
        let h = self.dw.forward(ctx.graph, &x)?;
        let h = self.pw.forward(ctx.graph, &h)?;
        let h = self.norm.forward(ctx, &h, &valid_out)?;
        let h = self.act.apply(ctx.graph, &h);
        let h = ctx.graph.dropout(ctx.train, ctx.rng, &h, self.dropout);
        let h = ctx.graph.mask_time(&h, &valid_out, 2);
        Ok((h, valid_out))
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        if let Some((norm, ffn)) = &self.ffn {
            norm.collect(&format!("{name}.ffn_norm"), t);
            ffn.collect(&format!("{name}.ffn"), t);
        }
        self.attn_norm.collect(&format!("{name}.attn_norm"), t);
        self.attn.collect(&format!("{name}.attn"), t);
        self.dw.collect(&format!("{name}.dw"), t);
        self.pw.collect(&format!("{name}.pw"), t);
        self.norm.collect(&format!("{name}.norm"), t);
    }
}

// ── Jasper block ────────────────────────────────────────────────────────────

pub enum ConvStack {
    Original(ConvModule),
    Enhanced(AttConvModule),
}

impl ConvStack {
    fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        match self {
            ConvStack::Original(m) => m.forward(ctx, x, valid),
            ConvStack::Enhanced(m) => m.forward(ctx, x, valid),
        }
    }

    fn collect(&self, name: &str, t: &mut ParamTable) {
        match self {
            ConvStack::Original(m) => m.collect(name, t),
            ConvStack::Enhanced(m) => m.collect(name, t),
        }
    }
}

/// Intermediate views for the gating decomposition tests.
pub struct BlockParts {
    pub output: Tensor,
    pub main: Tensor,
    pub gates: Tensor,
    pub res: Option<Tensor>,
    pub valid_out: Vec<usize>,
}

pub struct JasperBlock {
    pub spec: BlockSpec,
    pub conv: ConvStack,
    pub se: SeModule,
    pub res: Option<ResModule>,
}

impl JasperBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: BlockSpec,
        norm: NormKind,
        act: Activation,
        heads: usize,
        use_ffn: bool,
        dropout: f64,
        init: &mut Init,
    ) -> Result<JasperBlock> {
        spec.validate(heads)?;
        let conv = if spec.attention_enhanced {
            ConvStack::Enhanced(AttConvModule::new(&spec, norm, act, heads, use_ffn, dropout, init)?)
        } else {
            // The original module always uses batch norm + ReLU.
            ConvStack::Original(ConvModule::new(&spec, NormKind::Batch, Activation::Relu, dropout, init))
        };
        let se = SeModule::new(spec.out_channels, spec.se_reduction, init);
        let res = if spec.has_residual {
            Some(ResModule::new(spec.in_channels, spec.out_channels, spec.stride, init))
        } else {
            None
        };
        Ok(JasperBlock { spec, conv, se, res })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let parts = self.forward_parts(ctx, x, valid)?;
        Ok((parts.output, parts.valid_out))
    }

    /// Forward pass exposing the gated main path, the gate values and the
    /// residual path: `out = Res(x) + main * gates` (Res absent for
    /// prolog/epilog blocks).
    pub fn forward_parts(&self, ctx: &mut Ctx, x: &Tensor, valid: &[usize]) -> Result<BlockParts> {
        let (main, valid_out) = self.conv.forward(ctx, x, valid)?;
        let gates = self.se.forward(ctx, &main, &valid_out)?;
        let gated = ctx.graph.mul_gate(&main, &gates);
        let (output, res) = match &self.res {
            Some(res) => {
                let r = res.forward(ctx, x, &valid_out)?;
                (ctx.graph.add(&r, &gated), Some(r))
            }
            None => (gated, None),
        };
        let output = ctx.graph.mask_time(&output, &valid_out, 2);
        Ok(BlockParts {
            output,
            main,
            gates,
            res,
            valid_out,
        })
    }

    pub fn collect(&self, name: &str, t: &mut ParamTable) {
        self.conv.collect(&format!("{name}.conv"), t);
        self.se.collect(&format!("{name}.se"), t);
        if let Some(res) = &self.res {
            res.collect(&format!("{name}.res"), t);
        }
    }
}
