//! Waveform front end: log-mel FBank extraction, global CMVN, SpecAugment
//! masking and padded batching.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::{gaussian, seeded, uniform_incl, Rng};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: usize = 16_000;
pub const WIN_LEN: usize = 400; // 25 ms
pub const HOP_LEN: usize = 160; // 10 ms
pub const N_MELS: usize = 80;
pub const N_FFT: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
const CMVN_EPS: f64 = 1e-8;

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum: 80 filters spanning
/// 0–8000 Hz, peak weight 1. Returned as `[N_MELS][N_FFT/2 + 1]`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut bank = vec![vec![0.0; n_bins]; N_MELS];
    for m in 0..N_MELS {
        let (lo, center, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        for (k, row) in bank[m].iter_mut().enumerate() {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            if f > lo && f < center {
                *row = (f - lo) / (center - lo);
            } else if (f - center).abs() < 1e-12 {
                *row = 1.0;
            } else if f > center && f < hi {
                *row = (hi - f) / (hi - center);
            }
        }
    }
    bank
}

/// Number of frames for a waveform of `len` samples.
pub fn frame_count(len: usize) -> usize {
    (len - WIN_LEN) / HOP_LEN + 1
}

/// Log-mel FBank features `[80, T]` from a 16 kHz waveform. Per frame:
/// seeded additive Gaussian dither, Hann window, magnitude spectrum,
/// triangular mel integration, natural log with a floor.
pub fn fbank(wave: &[f64], dither_scale: f64, seed: u64) -> Result<Tensor> {
    if wave.len() < WIN_LEN {
        return Err(Error::Input(format!(
            "waveform of {} samples is shorter than one {} sample window",
            wave.len(),
            WIN_LEN
        )));
    }
    let t_frames = frame_count(wave.len());
    let bank = mel_filterbank();
    let window: Vec<f64> = (0..WIN_LEN)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (WIN_LEN - 1) as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let mut rng = seeded(seed, 0x0F_BA_4B);
    let mut out = vec![0.0; N_MELS * t_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for ti in 0..t_frames {
        let start = ti * HOP_LEN;
        for n in 0..N_FFT {
            buf[n] = Complex::new(0.0, 0.0);
        }
        for n in 0..WIN_LEN {
            let mut s = wave[start + n];
            if dither_scale != 0.0 {
                s += dither_scale * 1e-5 * gaussian(&mut rng);
            }
            buf[n] = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..N_FFT / 2 + 1].iter().map(|c| c.norm()).collect();
        for (m, filt) in bank.iter().enumerate() {
            let mut acc = 0.0;
            for (k, w) in filt.iter().enumerate() {
                if *w != 0.0 {
                    acc += w * mags[k];
                }
            }
            out[m * t_frames + ti] = acc.max(LOG_FLOOR).ln();
        }
    }
    Ok(Tensor::new(out, &[N_MELS, t_frames]))
}

// ── CMVN ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frames: usize,
}

/// Global per-dimension mean/variance over a corpus of `[80, T]` matrices.
pub fn cmvn_fit(corpus: &[Tensor]) -> Result<CmvnStats> {
    let total: usize = corpus.iter().map(|m| m.shape()[1]).sum();
    if corpus.is_empty() || total == 0 {
        return Err(Error::Input("cmvn_fit: empty corpus".into()));
    }
    let mut mean = vec![0.0; N_MELS];
    for m in corpus {
        assert_eq!(m.shape()[0], N_MELS);
        let t = m.shape()[1];
        let d = m.data();
        for dim in 0..N_MELS {
            for ti in 0..t {
                mean[dim] += d[dim * t + ti];
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= total as f64;
    }
    let mut var = vec![0.0; N_MELS];
    for m in corpus {
        let t = m.shape()[1];
        let d = m.data();
        for dim in 0..N_MELS {
            for ti in 0..t {
                let dv = d[dim * t + ti] - mean[dim];
                var[dim] += dv * dv;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= total as f64;
    }
    Ok(CmvnStats {
        mean,
        var,
        frames: total,
    })
}

/// `(x - mean) / sqrt(var + 1e-8)` per feature dimension.
pub fn cmvn_apply(x: &Tensor, stats: &CmvnStats) -> Tensor {
    assert_eq!(x.shape()[0], N_MELS);
    let t = x.shape()[1];
    let d = x.data();
    let mut out = vec![0.0; N_MELS * t];
    for dim in 0..N_MELS {
        let scale = 1.0 / (stats.var[dim] + CMVN_EPS).sqrt();
        for ti in 0..t {
            out[dim * t + ti] = (d[dim * t + ti] - stats.mean[dim]) * scale;
        }
    }
    drop(d);
    Tensor::new(out, &[N_MELS, t])
}

/// Inverse of [`cmvn_apply`].
pub fn cmvn_invert(x: &Tensor, stats: &CmvnStats) -> Tensor {
    let t = x.shape()[1];
    let d = x.data();
    let mut out = vec![0.0; N_MELS * t];
    for dim in 0..N_MELS {
        let scale = (stats.var[dim] + CMVN_EPS).sqrt();
        for ti in 0..t {
            out[dim * t + ti] = d[dim * t + ti] * scale + stats.mean[dim];
        }
    }
    drop(d);
    Tensor::new(out, &[N_MELS, t])
}

impl CmvnStats {
    /// Text form: a `frames N` header, then one `idx mean variance` line per
    /// dimension. f64s print in shortest round-trip form, so save/load is
    /// bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "frames {}", self.frames)?;
        for i in 0..N_MELS {
            writeln!(f, "{} {} {}", i, self.mean[i], self.var[i])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CmvnStats> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("cmvn stats: empty file".into()))?;
        let frames: usize = header
            .strip_prefix("frames ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("cmvn stats: bad header {header:?}")))?;
        let mut mean = vec![0.0; N_MELS];
        let mut var = vec![0.0; N_MELS];
        for line in lines {
            let mut it = line.split_whitespace();
            let idx: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("cmvn stats: bad line {line:?}")))?;
            if idx >= N_MELS {
                return Err(Error::Format(format!("cmvn stats: dim {idx} out of range")));
            }
            mean[idx] = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("cmvn stats: bad mean".into()))?;
            var[idx] = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("cmvn stats: bad variance".into()))?;
        }
        Ok(CmvnStats { mean, var, frames })
    }
}

// ── SpecAugment ─────────────────────────────────────────────────────────────

pub const FREQ_MASKS: usize = 2;
pub const FREQ_MASK_WIDTH: usize = 10;
pub const TIME_MASKS: usize = 2;
pub const TIME_MASK_WIDTH: usize = 50;

/// Two frequency masks (width uniform in `[0, 10]`) and two time masks
/// (width uniform in `[0, min(50, T)]`), cells zeroed, deterministic per seed.
pub fn spec_augment(x: &Tensor, seed: u64) -> Tensor {
    assert_eq!(x.shape()[0], N_MELS);
    let t = x.shape()[1];
    let mut rng = seeded(seed, 0x5BEC);
    let mut out = x.to_vec();
    for _ in 0..FREQ_MASKS {
        let w = uniform_incl(&mut rng, FREQ_MASK_WIDTH);
        if w == 0 {
            continue;
        }
        let start = uniform_incl(&mut rng, N_MELS - w);
        for dim in start..start + w {
            for ti in 0..t {
                out[dim * t + ti] = 0.0;
            }
        }
    }
    for _ in 0..TIME_MASKS {
        let w = uniform_incl(&mut rng, TIME_MASK_WIDTH.min(t));
        if w == 0 {
            continue;
        }
        let start = uniform_incl(&mut rng, t - w);
        for dim in 0..N_MELS {
            for ti in start..start + w {
                out[dim * t + ti] = 0.0;
            }
        }
    }
    Tensor::new(out, &[N_MELS, t])
}

/// Fresh per-call SpecAugment driven by a training RNG stream instead of a
/// fixed seed (used inside the training loop, still fully deterministic).
pub fn spec_augment_step(x: &Tensor, rng: &mut Rng) -> Tensor {
    let seed = rand::Rng::gen::<u64>(rng);
    spec_augment(x, seed)
}

// ── Batching ────────────────────────────────────────────────────────────────

/// Zero-padded batch of feature matrices with per-item valid frame counts.
pub struct FeatureBatch {
    /// `[B, 80, Tmax]`; frames at or beyond `valid_len[b]` are exactly zero.
    pub features: Tensor,
    pub valid_len: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(mats: &[Tensor]) -> FeatureBatch {
        assert!(!mats.is_empty());
        let b = mats.len();
        let tmax = mats.iter().map(|m| m.shape()[1]).max().unwrap();
        let mut data = vec![0.0; b * N_MELS * tmax];
        let mut valid = Vec::with_capacity(b);
        for (bi, m) in mats.iter().enumerate() {
            assert_eq!(m.shape()[0], N_MELS);
            let t = m.shape()[1];
            valid.push(t);
            let md = m.data();
            for dim in 0..N_MELS {
                for ti in 0..t {
                    data[(bi * N_MELS + dim) * tmax + ti] = md[dim * t + ti];
                }
            }
        }
        FeatureBatch {
            features: Tensor::new(data, &[b, N_MELS, tmax]),
            valid_len: valid,
        }
    }

    /// Same contents re-padded to a larger Tmax (padding-invariance tests).
    pub fn repadded(&self, extra: usize) -> FeatureBatch {
        let s = self.features.shape().to_vec();
        let (b, tmax) = (s[0], s[2]);
        let new_t = tmax + extra;
        let src = self.features.data();
        let mut data = vec![0.0; b * N_MELS * new_t];
        for bi in 0..b {
            for dim in 0..N_MELS {
                for ti in 0..tmax {
                    data[(bi * N_MELS + dim) * new_t + ti] = src[(bi * N_MELS + dim) * tmax + ti];
                }
            }
        }
        drop(src);
        FeatureBatch {
            features: Tensor::new(data, &[b, N_MELS, new_t]),
            valid_len: self.valid_len.clone(),
        }
    }
}

// ── Debug feature dump ──────────────────────────────────────────────────────

const DUMP_MAGIC: &[u8; 4] = b"FBNK";

/// Binary dump: magic "FBNK", u32 dims, u32 frames, f64 row-major LE.
pub fn write_feature_dump(path: &Path, feats: &Tensor) -> Result<()> {
    assert_eq!(feats.shape().len(), 2);
    let mut f = std::fs::File::create(path)?;
    f.write_all(DUMP_MAGIC)?;
    f.write_all(&(feats.shape()[0] as u32).to_le_bytes())?;
    f.write_all(&(feats.shape()[1] as u32).to_le_bytes())?;
    for v in feats.data().iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format("feature dump: bad magic".into()));
    }
    let mut u = [0u8; 4];
    f.read_exact(&mut u)?;
    let dims = u32::from_le_bytes(u) as usize;
    f.read_exact(&mut u)?;
    let frames = u32::from_le_bytes(u) as usize;
    let mut data = vec![0.0; dims * frames];
    let mut b = [0u8; 8];
    for v in data.iter_mut() {
        f.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Ok(Tensor::new(data, &[dims, frames]))
}

/// Hide an unused-import warning path for Rc used by callers of mask helpers.
#[allow(dead_code)]
fn _rc_marker(_: Rc<()>) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let wave = vec![0.0; SAMPLE_RATE];
        let f = fbank(&wave, 0.0, 0).unwrap();
        assert_eq!(f.shape(), &[80, 98]);
    }

    #[test]
    fn silence_hits_log_floor() {
        let wave = vec![0.0; WIN_LEN + HOP_LEN];
        let f = fbank(&wave, 0.0, 0).unwrap();
        let expect = LOG_FLOOR.ln();
        for v in f.to_vec() {
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn short_wave_rejected() {
        let wave = vec![0.0; WIN_LEN - 1];
        assert!(matches!(fbank(&wave, 1.0, 0), Err(Error::Input(_))));
    }

    #[test]
    fn fbank_deterministic_given_seed() {
        let wave: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.1).sin()).collect();
        let a = fbank(&wave, 1.0, 42).unwrap();
        let b = fbank(&wave, 1.0, 42).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let c = fbank(&wave, 1.0, 43).unwrap();
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn one_khz_tone_lands_in_expected_mel_bin() {
        let freq = 1000.0;
        let wave: Vec<f64> = (0..SAMPLE_RATE / 2)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let f = fbank(&wave, 0.0, 0).unwrap();
        let t = f.shape()[1];
        let d = f.data();
        // Independent recomputation of the two candidate filters whose
        // triangles straddle 1 kHz.
        let mel_max = hz_to_mel(8000.0);
        let center_hz =
            |i: usize| mel_to_hz(mel_max * (i + 1) as f64 / (N_MELS + 1) as f64);
        let mut below = 0;
        for i in 0..N_MELS {
            if center_hz(i) <= freq {
                below = i;
            }
        }
        let candidates = [below, below + 1];
        let mut first_argmax = None;
        for ti in 0..t {
            let mut best = 0;
            for dim in 0..N_MELS {
                if d[dim * t + ti] > d[best * t + ti] {
                    best = dim;
                }
            }
            match first_argmax {
                None => first_argmax = Some(best),
                Some(fa) => assert_eq!(fa, best, "argmax moved between frames"),
            }
            assert!(
                candidates.contains(&best),
                "argmax bin {best} not in {candidates:?}"
            );
        }
    }

    #[test]
    fn cmvn_self_normalization() {
        let mut rng = crate::rng::seeded(1, 0);
        let mats: Vec<Tensor> = (0..3)
            .map(|_| {
                let t = 30;
                Tensor::new(
                    (0..N_MELS * t)
                        .map(|_| crate::rng::gaussian(&mut rng) * 3.0 + 2.0)
                        .collect(),
                    &[N_MELS, t],
                )
            })
            .collect();
        let stats = cmvn_fit(&mats).unwrap();
        // Re-estimate mean/var of the normalized corpus.
        let normed: Vec<Tensor> = mats.iter().map(|m| cmvn_apply(m, &stats)).collect();
        let restats = cmvn_fit(&normed).unwrap();
        for dim in 0..N_MELS {
            assert!(restats.mean[dim].abs() <= 1e-9);
            assert!((restats.var[dim] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cmvn_constant_dim_normalizes_to_zero() {
        let m = Tensor::full(&[N_MELS, 10], 4.0);
        let stats = cmvn_fit(std::slice::from_ref(&m)).unwrap();
        let out = cmvn_apply(&m, &stats);
        for v in out.to_vec() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cmvn_empty_corpus_is_error() {
        assert!(cmvn_fit(&[]).is_err());
    }

    #[test]
    fn cmvn_round_trip_is_bit_identical() {
        let mut rng = crate::rng::seeded(4, 0);
        let m = Tensor::new(
            (0..N_MELS * 12).map(|_| crate::rng::gaussian(&mut rng)).collect(),
            &[N_MELS, 12],
        );
        let stats = cmvn_fit(std::slice::from_ref(&m)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmvn.txt");
        stats.save(&path).unwrap();
        let loaded = CmvnStats::load(&path).unwrap();
        assert_eq!(stats, loaded);
        let a = cmvn_apply(&m, &stats);
        let b = cmvn_apply(&m, &loaded);
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn cmvn_invertible() {
        let mut rng = crate::rng::seeded(9, 0);
        let m = Tensor::new(
            (0..N_MELS * 15).map(|_| crate::rng::gaussian(&mut rng) * 2.0).collect(),
            &[N_MELS, 15],
        );
        let stats = cmvn_fit(std::slice::from_ref(&m)).unwrap();
        let back = cmvn_invert(&cmvn_apply(&m, &stats), &stats);
        for (a, b) in m.to_vec().iter().zip(back.to_vec()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn spec_augment_masks_bounded_and_deterministic() {
        let mut rng = crate::rng::seeded(2, 0);
        let t = 120;
        let m = Tensor::new(
            (0..N_MELS * t).map(|_| 1.0 + crate::rng::gaussian(&mut rng).abs()).collect(),
            &[N_MELS, t],
        );
        let a = spec_augment(&m, 77);
        let b = spec_augment(&m, 77);
        assert_eq!(a.to_vec(), b.to_vec());
        // Count fully-zeroed frequency rows; at most 2*10.
        let ad = a.to_vec();
        let zero_rows = (0..N_MELS)
            .filter(|dim| (0..t).all(|ti| ad[dim * t + ti] == 0.0))
            .count();
        assert!(zero_rows <= FREQ_MASKS * FREQ_MASK_WIDTH);
    }

    #[test]
    fn spec_augment_only_touches_masked_cells() {
        let t = 60;
        let m = Tensor::full(&[N_MELS, t], 3.5);
        let a = spec_augment(&m, 5);
        // Every cell is either untouched or exactly zero.
        for v in a.to_vec() {
            assert!(v == 3.5 || v == 0.0);
        }
    }

    #[test]
    fn zero_width_masks_leave_input_unchanged() {
        // Tiny T keeps the all-zero-width draw likely enough to find a seed.
        let t = 2;
        let m = Tensor::full(&[N_MELS, t], 1.25);
        for seed in 0..50_000u64 {
            let out = spec_augment(&m, seed);
            if out.to_vec().iter().all(|&v| v == 1.25) {
                return;
            }
        }
        panic!("no identity-mask seed found in range");
    }

    #[test]
    fn feature_batch_pads_with_exact_zeros() {
        let a = Tensor::full(&[N_MELS, 5], 1.0);
        let b = Tensor::full(&[N_MELS, 9], 2.0);
        let batch = FeatureBatch::new(&[a, b]);
        assert_eq!(batch.features.shape(), &[2, N_MELS, 9]);
        assert_eq!(batch.valid_len, vec![5, 9]);
        let d = batch.features.data();
        for dim in 0..N_MELS {
            for ti in 5..9 {
                assert_eq!(d[(dim) * 9 + ti], 0.0);
            }
        }
    }

    #[test]
    fn feature_dump_round_trip() {
        let m = Tensor::new((0..N_MELS * 7).map(|i| i as f64 * 0.5).collect(), &[N_MELS, 7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        write_feature_dump(&path, &m).unwrap();
        let back = read_feature_dump(&path).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert_eq!(back.to_vec(), m.to_vec());
    }
}
