//! Model/run configuration: defaults per variant, flat `key = value` text
//! format, and validation of the structural constraints.

use crate::blocks::NormKind;
use crate::error::{Error, Result};
use crate::layers::Activation;

/// Block totals the schedule accepts: the pruning study's value set, the full
/// 23-block layout, and small desk-scale totals (3-7) for tests.
pub const ALLOWED_TOTALS: &[usize] = &[3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 15, 17, 20, 23];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Original Citrinet: repeat-5 conv modules, batch norm, ReLU, CTC only.
    C,
    /// Attention-enhanced: repeat-1 modules with FFN+MHSA, layer norm,
    /// Swish, plus the bidirectional decoder.
    AttC,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::C => "c",
            Variant::AttC => "att-c",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "c" => Ok(Variant::C),
            "att-c" | "attc" | "att_c" => Ok(Variant::AttC),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub total_blocks: usize,
    pub vocab: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beam_width: usize,
    pub w_ctc: f64,
    pub dropout: f64,
    pub use_bidecoder: bool,
    pub use_ffn: bool,
    pub norm: NormKind,
    pub act: Activation,
    pub decoder_dim: usize,
    pub epilog_dim: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    pub se_reduction: usize,
    pub dither: f64,
    pub spec_augment: bool,
    pub max_frames_per_batch: usize,
    pub ckpt_interval: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

/// Decoder width rule: 256 for C=256, 384 for C=384, 512 otherwise.
pub fn default_decoder_dim(channels: usize) -> usize {
    match channels {
        256 => 256,
        384 => 384,
        _ => 512,
    }
}

impl ModelConfig {
    pub fn citrinet(channels: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::C,
            channels,
            total_blocks: 23,
            vocab: 4096,
            lambda1: 1.0,
            lambda2: 0.7,
            delta: 0.1,
            lr_max: 0.05,
            lr_min: 0.0,
            warmup_steps: 10_000,
            total_steps: 100_000,
            beam_width: 8,
            w_ctc: 0.3,
            dropout: 0.1,
            use_bidecoder: false,
            use_ffn: true,
            norm: NormKind::Batch,
            act: Activation::Relu,
            decoder_dim: default_decoder_dim(channels),
            epilog_dim: 640,
            heads: 8,
            decoder_blocks: 3,
            se_reduction: 8,
            dither: 1.0,
            spec_augment: true,
            max_frames_per_batch: 2000,
            ckpt_interval: 100,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }

    pub fn att_citrinet(channels: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::AttC,
            total_blocks: 13,
            lambda1: 0.3,
            use_bidecoder: true,
            norm: NormKind::Layer,
            act: Activation::Swish,
            ..ModelConfig::citrinet(channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !ALLOWED_TOTALS.contains(&self.total_blocks) {
            return Err(Error::Config(format!(
                "total_blocks {} not in allowed set {:?}",
                self.total_blocks, ALLOWED_TOTALS
            )));
        }
        if self.channels == 0 || self.channels % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of se_reduction {}",
                self.channels, self.se_reduction
            )));
        }
        if self.variant == Variant::AttC && self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} attention heads",
                self.channels, self.heads
            )));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocab must be positive".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.w_ctc) {
            return Err(Error::Config(format!("w_ctc = {} outside [0, 1]", self.w_ctc)));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta = {} outside [0, 1)", self.delta)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        if self.variant == Variant::C && self.use_bidecoder {
            return Err(Error::Config("variant c does not take a decoder".into()));
        }
        if !self.use_bidecoder && self.lambda1 != 1.0 {
            return Err(Error::Config(
                "without a decoder the loss is pure CTC: lambda1 must be 1".into(),
            ));
        }
        if self.use_bidecoder && self.decoder_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by {} heads",
                self.decoder_dim, self.heads
            )));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Canonical flat text form: fixed key order, shortest round-trip floats.
    pub fn to_text(&self) -> String {
        let norm = match self.norm {
            NormKind::Layer => "layer",
            NormKind::Batch => "batch",
        };
        let act = match self.act {
            Activation::Swish => "swish",
            Activation::Relu => "relu",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("variant", self.variant.as_str().into());
        kv("channels", self.channels.to_string());
        kv("total_blocks", self.total_blocks.to_string());
        kv("vocab", self.vocab.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("delta", self.delta.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("beam_width", self.beam_width.to_string());
        kv("w_ctc", self.w_ctc.to_string());
        kv("dropout", self.dropout.to_string());
        kv("use_bidecoder", self.use_bidecoder.to_string());
        kv("use_ffn", self.use_ffn.to_string());
        kv("norm", norm.into());
        kv("act", act.into());
        kv("decoder_dim", self.decoder_dim.to_string());
        kv("epilog_dim", self.epilog_dim.to_string());
        kv("heads", self.heads.to_string());
        kv("decoder_blocks", self.decoder_blocks.to_string());
        kv("se_reduction", self.se_reduction.to_string());
        kv("dither", self.dither.to_string());
        kv("spec_augment", self.spec_augment.to_string());
        kv("max_frames_per_batch", self.max_frames_per_batch.to_string());
        kv("ckpt_interval", self.ckpt_interval.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        s
    }

    /// Parse the flat `key = value` format. `variant` and `channels` are
    /// required; everything else defaults from the variant. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let find = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let variant = Variant::parse(
            find("variant").ok_or_else(|| Error::Config("config missing `variant`".into()))?,
        )?;
        let channels: usize = parse_num(
            find("channels").ok_or_else(|| Error::Config("config missing `channels`".into()))?,
            "channels",
        )?;
        let mut cfg = match variant {
            Variant::C => ModelConfig::citrinet(channels),
            Variant::AttC => ModelConfig::att_citrinet(channels),
        };
        for (k, v) in &pairs {
            match k.as_str() {
                "variant" | "channels" => {}
                "total_blocks" => cfg.total_blocks = parse_num(v, k)?,
                "vocab" => cfg.vocab = parse_num(v, k)?,
                "lambda1" => cfg.lambda1 = parse_num(v, k)?,
                "lambda2" => cfg.lambda2 = parse_num(v, k)?,
                "delta" => cfg.delta = parse_num(v, k)?,
                "lr_max" => cfg.lr_max = parse_num(v, k)?,
                "lr_min" => cfg.lr_min = parse_num(v, k)?,
                "warmup_steps" => cfg.warmup_steps = parse_num(v, k)?,
                "total_steps" => cfg.total_steps = parse_num(v, k)?,
                "beam_width" => cfg.beam_width = parse_num(v, k)?,
                "w_ctc" => cfg.w_ctc = parse_num(v, k)?,
                "dropout" => cfg.dropout = parse_num(v, k)?,
                "use_bidecoder" => cfg.use_bidecoder = parse_bool(v, k)?,
                "use_ffn" => cfg.use_ffn = parse_bool(v, k)?,
                "norm" => {
                    cfg.norm = match v.as_str() {
                        "layer" => NormKind::Layer,
                        "batch" => NormKind::Batch,
                        other => return Err(Error::Config(format!("norm must be layer|batch, got {other:?}"))),
                    }
                }
                "act" => {
                    cfg.act = match v.as_str() {
                        "swish" => Activation::Swish,
                        "relu" => Activation::Relu,
                        other => return Err(Error::Config(format!("act must be swish|relu, got {other:?}"))),
                    }
                }
                "decoder_dim" => cfg.decoder_dim = parse_num(v, k)?,
                "epilog_dim" => cfg.epilog_dim = parse_num(v, k)?,
                "heads" => cfg.heads = parse_num(v, k)?,
                "decoder_blocks" => cfg.decoder_blocks = parse_num(v, k)?,
                "se_reduction" => cfg.se_reduction = parse_num(v, k)?,
                "dither" => cfg.dither = parse_num(v, k)?,
                "spec_augment" => cfg.spec_augment = parse_bool(v, k)?,
                "max_frames_per_batch" => cfg.max_frames_per_batch = parse_num(v, k)?,
                "ckpt_interval" => cfg.ckpt_interval = parse_num(v, k)?,
                "weight_decay" => cfg.weight_decay = parse_num(v, k)?,
                "grad_clip" => cfg.grad_clip = parse_num(v, k)?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ModelConfig> {
        ModelConfig::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean {other:?} for key {key}"))),
    }
}
