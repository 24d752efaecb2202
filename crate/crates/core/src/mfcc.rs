//! Reference MFCC front end (40 coefficients, 40 ms frames, 20 ms stride).
//!
//! Only used for cost comparison and fixtures; the classifier consumes the
//! folded waveform directly. Internals are computed in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub n_mfcc: usize,
    pub frame_len: usize,
    pub stride: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            n_mfcc: 40,
            frame_len: 640,
            stride: 320,
            n_fft: 1024,
            n_mels: 40,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.stride == 0 || self.frame_len > self.n_fft {
            return Err(Error::Config(format!(
                "frame_len {} must be in 1..=n_fft ({}) and stride positive",
                self.frame_len, self.n_fft
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_fft {} is not a power of two",
                self.n_fft
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config("need 0 < n_mfcc <= n_mels".into()));
        }
        if !(self.f_min >= 0.0
            && self.f_min < self.f_max
            && self.f_max <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::Config("need 0 <= f_min < f_max <= Nyquist".into()));
        }
        Ok(())
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.stride + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Symmetric Hamming window `0.54 − 0.46·cos(2πn/(N−1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Overlapping Hamming-windowed frames.
pub fn frame_signal(samples: &[f32], cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    if samples.len() < cfg.frame_len {
        return Err(Error::invalid(format!(
            "{} samples is shorter than one {}-sample frame",
            samples.len(),
            cfg.frame_len
        )));
    }
    let win = hamming(cfg.frame_len);
    Ok((0..cfg.n_frames(samples.len()))
        .map(|f| {
            let start = f * cfg.stride;
            samples[start..start + cfg.frame_len]
                .iter()
                .zip(&win)
                .map(|(&s, &w)| s as f64 * w)
                .collect()
        })
        .collect())
}

/// In-place iterative radix-2 decimation-in-time FFT.
pub fn fft(re: &mut [f64], im: &mut [f64]) -> Result<()> {
    let n = re.len();
    if im.len() != n {
        return Err(Error::shape(
            "fft real and imaginary parts differ in length",
        ));
    }
    if !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "fft size {n} is not a power of two"
        )));
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = if bits == 0 {
            0
        } else {
            i.reverse_bits() >> (usize::BITS - bits)
        };
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -std::f64::consts::TAU / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (ws, wc) = (ang * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wc - im[b] * ws;
                let ti = re[b] * ws + im[b] * wc;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// `|FFT|²` of each frame zero-padded to `n_fft`, bins `0..=n_fft/2`.
pub fn power_spectrum(frames: &[Vec<f64>], n_fft: usize) -> Result<Vec<Vec<f64>>> {
    if !n_fft.is_power_of_two() {
        return Err(Error::invalid(format!(
            "n_fft {n_fft} is not a power of two"
        )));
    }
    frames
        .iter()
        .map(|frame| {
            if frame.len() > n_fft {
                return Err(Error::invalid("frame longer than n_fft"));
            }
            let mut re = vec![0.0f64; n_fft];
            re[..frame.len()].copy_from_slice(frame);
            let mut im = vec![0.0f64; n_fft];
            fft(&mut re, &mut im)?;
            Ok((0..=n_fft / 2)
                .map(|k| re[k] * re[k] + im[k] * im[k])
                .collect())
        })
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Unit-peak triangular filters with centers uniform on the mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × n_bins` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MfccConfig) -> Self {
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = |b: usize| b as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let weights = (1..=cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m - 1], edges[m], edges[m + 1]);
                (0..cfg.n_bins())
                    .map(|b| {
                        let f = bin_hz(b);
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { weights }
    }

    /// Number of nonzero taps per filter.
    pub fn support_sizes(&self) -> Vec<usize> {
        self.weights
            .iter()
            .map(|w| w.iter().filter(|&&v| v > 0.0).count())
            .collect()
    }

    pub fn apply(&self, spec: &[Vec<f64>]) -> Vec<Vec<f64>> {
        spec.iter()
            .map(|row| {
                self.weights
                    .iter()
                    .map(|w| w.iter().zip(row).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }
}

pub fn mel_filterbank(spec: &[Vec<f64>], cfg: &MfccConfig) -> Vec<Vec<f64>> {
    MelFilterbank::new(cfg).apply(spec)
}

/// Orthonormal DCT-II matrix, `n_out × n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let norm = if k == 0 {
                (1.0 / n_in as f64).sqrt()
            } else {
                (2.0 / n_in as f64).sqrt()
            };
            (0..n_in)
                .map(|n| {
                    norm * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64
                        / (2 * n_in) as f64)
                        .cos()
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II of `ln(mel + 1e-10)`, first `n_mfcc` coefficients,
/// one row per frame.
pub fn mfcc(samples: &[f32], cfg: &MfccConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let frames = frame_signal(samples, cfg)?;
    let spec = power_spectrum(&frames, cfg.n_fft)?;
    let mel = mel_filterbank(&spec, cfg);
    let dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
    Ok(mel
        .iter()
        .map(|row| {
            let logs: Vec<f64> = row.iter().map(|&v| (v + 1e-10).ln()).collect();
            dct.iter()
                .map(|basis| basis.iter().zip(&logs).map(|(a, b)| a * b).sum::<f64>() as f32)
                .collect()
        })
        .collect())
}
