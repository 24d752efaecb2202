//! Class-distinct multi-tone clips for desk-scale runs.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioClip, SAMPLE_RATE};

const CLIP_LEN: usize = 16_000;

fn class_tones(class: usize) -> [f32; 2] {
    let f1 = 250.0 + 550.0 * class as f32;
    let f2 = if f1 * 1.5 < 7800.0 {
        f1 * 1.5
    } else {
        f1 * 0.75
    };
    [f1, f2]
}

/// `per_class` one-second clips for each of `n_classes` tone pairs, with
/// random phase, ±2% pitch jitter, amplitude, onset and light noise. Every
/// clip gets its own speaker id.
pub fn synthetic_clips(n_classes: usize, per_class: usize, seed: u64) -> Vec<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(n_classes * per_class);
    for i in 0..per_class {
        for class in 0..n_classes {
            let jitter = rng.random_range(0.98f32..1.02);
            let tones = class_tones(class).map(|f| f * jitter);
            let amps = [rng.random_range(0.2f32..0.5), rng.random_range(0.1f32..0.3)];
            let phases = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
            let onset = rng.random_range(0..4000usize);
            let duration = rng.random_range(8000..12_000usize);
            let ramp = 400.0f32;
            let samples = (0..CLIP_LEN)
                .map(|t| {
                    let env = if t < onset || t >= onset + duration {
                        0.0
                    } else {
                        let a = (t - onset) as f32 / ramp;
                        let b = (onset + duration - t) as f32 / ramp;
                        a.min(b).min(1.0)
                    };
                    let time = t as f32 / SAMPLE_RATE as f32;
                    let s: f32 = (0..2)
                        .map(|k| amps[k] * (TAU * tones[k] * time + phases[k]).sin())
                        .sum();
                    env * s + rng.random_range(-0.02f32..0.02)
                })
                .collect();
            clips.push(AudioClip {
                samples,
                label: class,
                speaker_id: format!("synth{seed:x}-{class}-{i}"),
            });
        }
    }
    clips
}
