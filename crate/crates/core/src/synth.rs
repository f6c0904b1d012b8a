//! Synthetic tone-sequence dataset: each token maps to a fixed pure-tone
//! frequency; waveforms are deterministic functions of (tokens, seed), so a
//! tiny manifest file fully describes a corpus.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::SAMPLE_RATE;
use crate::rng::{seeded, uniform_range};

pub const TONE_SECONDS: f64 = 0.12;
pub const GAP_SECONDS: f64 = 0.04;
pub const TONE_AMPLITUDE: f64 = 0.25;
const FADE_SECONDS: f64 = 0.005;
pub const MAX_VOCAB_SUBSET: usize = 64;

/// Injective token-to-frequency map, spanning 200-6500 Hz for ids below 64.
pub fn token_frequency(token: usize) -> f64 {
    200.0 + 100.0 * token as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub tokens: Vec<usize>,
    pub seed: u64,
}

impl SynthSample {
    /// 16 kHz waveform: leading/trailing silence, one faded tone per token,
    /// short gaps between tones. Fully determined by (tokens, seed); the
    /// seed additionally drives feature-extraction dither downstream.
    pub fn waveform(&self) -> Vec<f64> {
        let tone_len = (TONE_SECONDS * SAMPLE_RATE as f64) as usize;
        let gap_len = (GAP_SECONDS * SAMPLE_RATE as f64) as usize;
        let fade_len = (FADE_SECONDS * SAMPLE_RATE as f64) as usize;
        let total = gap_len + self.tokens.len() * (tone_len + gap_len);
        let mut wave = vec![0.0; total];
        let mut pos = gap_len;
        for &tok in &self.tokens {
            let freq = token_frequency(tok);
            for i in 0..tone_len {
                let t = i as f64 / SAMPLE_RATE as f64;
                let mut v = TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * freq * t).sin();
                if i < fade_len {
                    let w = i as f64 / fade_len as f64;
                    v *= 0.5 * (1.0 - (std::f64::consts::PI * w).cos());
                }
                if i + fade_len >= tone_len {
                    let w = (tone_len - i) as f64 / fade_len as f64;
                    v *= 0.5 * (1.0 - (std::f64::consts::PI * w.min(1.0)).cos());
                }
                wave[pos + i] = v;
            }
            pos += tone_len + gap_len;
        }
        wave
    }
}

/// Deterministic corpus of `n` samples with token lengths uniform in
/// `[min_len, max_len]` drawn from the first `vocab_subset` token ids.
pub fn synth_dataset(
    n: usize,
    seed: u64,
    vocab_subset: usize,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<SynthSample>> {
    if vocab_subset == 0 || vocab_subset > MAX_VOCAB_SUBSET {
        return Err(Error::Config(format!(
            "vocab_subset must be in 1..={MAX_VOCAB_SUBSET}, got {vocab_subset}"
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!(
            "bad token length range [{min_len}, {max_len}]"
        )));
    }
    let mut rng = seeded(seed, 0x5A17);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = uniform_range(&mut rng, min_len, max_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| uniform_range(&mut rng, 0, vocab_subset - 1))
            .collect();
        let sample_seed = rand::Rng::gen::<u64>(&mut rng);
        out.push(SynthSample {
            tokens,
            seed: sample_seed,
        });
    }
    Ok(out)
}

/// Manifest: a `synthv1 <n> <vocab_subset>` header, then one
/// `<seed> tok tok ...` line per sample.
pub fn write_manifest(path: &Path, samples: &[SynthSample], vocab_subset: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "synthv1 {} {}", samples.len(), vocab_subset)?;
    for s in samples {
        write!(f, "{}", s.seed)?;
        for t in &s.tokens {
            write!(f, " {t}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(Vec<SynthSample>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("manifest: empty file".into()))?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some("synthv1") {
        return Err(Error::Format("manifest: bad header".into()));
    }
    let n: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("manifest: bad sample count".into()))?;
    let vocab_subset: usize = hp
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("manifest: bad vocab subset".into()))?;
    let mut samples = Vec::with_capacity(n);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let seed: u64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("manifest: bad line {line:?}")))?;
        let tokens: Vec<usize> = it
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("manifest: bad token {t:?}")))
            })
            .collect::<Result<_>>()?;
        samples.push(SynthSample { tokens, seed });
    }
    if samples.len() != n {
        return Err(Error::Format(format!(
            "manifest: expected {n} samples, found {}",
            samples.len()
        )));
    }
    Ok((samples, vocab_subset))
}
