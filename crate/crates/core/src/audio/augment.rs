use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};

/// Random ranges for the stretch → shift → noise chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub stretch_range: (f32, f32),
    /// Shift bounds in seconds.
    pub shift_range_s: (f32, f32),
    pub noise_var_range: (f32, f32),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            stretch_range: (0.8, 1.3),
            shift_range_s: (-0.1, 0.1),
            noise_var_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Ranges that leave the clip unchanged apart from padding.
    pub fn identity() -> Self {
        AugmentSpec {
            stretch_range: (1.0, 1.0),
            shift_range_s: (0.0, 0.0),
            noise_var_range: (0.0, 0.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f32, f32)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.stretch_range)
            || !ordered(self.shift_range_s)
            || !ordered(self.noise_var_range)
        {
            return Err(Error::invalid(format!(
                "augmentation ranges must be ordered: {self:?}"
            )));
        }
        if self.stretch_range.0 <= 0.0 {
            return Err(Error::invalid("stretch factors must be positive"));
        }
        if self.noise_var_range.0 < 0.0 {
            return Err(Error::invalid("noise variance must be non-negative"));
        }
        Ok(())
    }
}

/// The random values drawn for one augmented example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub stretch: f32,
    pub shift_s: f32,
    pub noise_var: f32,
}

/// Center zero-pads (extra sample at the end) or center-crops to 16384.
pub fn pad_to_window(samples: &[f32]) -> Vec<f32> {
    let n = samples.len();
    if n >= WINDOW {
        let start = (n - WINDOW) / 2;
        return samples[start..start + WINDOW].to_vec();
    }
    let front = (WINDOW - n) / 2;
    let mut out = vec![0.0f32; WINDOW];
    out[front..front + n].copy_from_slice(samples);
    out
}

/// Resamples to `round(len / factor)` samples by linear interpolation (end
/// points aligned), then pads to the window. `factor > 1` speeds speech up.
pub fn stretch(samples: &[f32], factor: f32) -> Vec<f32> {
    pad_to_window(&resample_linear(samples, factor))
}

pub(crate) fn resample_linear(samples: &[f32], factor: f32) -> Vec<f32> {
    let n = samples.len();
    if n < 2 || factor == 1.0 {
        return samples.to_vec();
    }
    let out_len = ((n as f64 / factor as f64).round() as usize).max(1);
    if out_len == 1 {
        return vec![samples[0]];
    }
    let step = (n - 1) as f64 / (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = (pos - i as f64) as f32;
            samples[i] + (samples[i + 1] - samples[i]) * frac
        })
        .collect()
}

/// Delays (positive `t_seconds`) or advances the signal by
/// `round(t·16000)` samples, zero-filling the vacated region.
pub fn shift(samples: &[f32], t_seconds: f32) -> Vec<f32> {
    let n = samples.len();
    let offset = (t_seconds as f64 * SAMPLE_RATE as f64).round() as i64;
    let mut out = vec![0.0f32; n];
    if offset.unsigned_abs() as usize >= n {
        return out;
    }
    if offset >= 0 {
        let k = offset as usize;
        out[k..].copy_from_slice(&samples[..n - k]);
    } else {
        let k = (-offset) as usize;
        out[..n - k].copy_from_slice(&samples[k..]);
    }
    out
}

/// Adds i.i.d. N(0, variance) noise. The result is not clipped.
pub fn add_noise<R: Rng + ?Sized>(samples: &[f32], variance: f32, rng: &mut R) -> Result<Vec<f32>> {
    if !(variance >= 0.0) {
        return Err(Error::invalid(format!(
            "noise variance {variance} is negative"
        )));
    }
    if variance == 0.0 {
        return Ok(samples.to_vec());
    }
    let normal = Normal::new(0.0f32, variance.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(samples.iter().map(|&s| s + normal.sample(rng)).collect())
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stretch, then shift, then noise. Pure in `(samples, spec, sample_seed)`.
pub fn augment(
    samples: &[f32],
    spec: &AugmentSpec,
    sample_seed: u64,
) -> Result<(Vec<f32>, AugmentDraw)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, sample_seed));
    let d = AugmentDraw {
        stretch: draw(&mut rng, spec.stretch_range),
        shift_s: draw(&mut rng, spec.shift_range_s),
        noise_var: draw(&mut rng, spec.noise_var_range),
    };
    let out = stretch(samples, d.stretch);
    let out = shift(&out, d.shift_s);
    let out = add_noise(&out, d.noise_var, &mut rng)?;
    Ok((out, d))
}
