use std::f64::consts::PI;

use super::AudioClip;

const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Output length is `round(len · to / from)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    let from = clip.sample_rate() as f64;
    let to = target_rate as f64;
    if clip.sample_rate() == target_rate {
        return clip.clone();
    }
    let ratio = to / from;
    // cutoff relative to the input Nyquist
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let out_len = (clip.len() as f64 * ratio).round() as usize;
    let channels = clip
        .channels()
        .iter()
        .map(|x| {
            (0..out_len)
                .map(|j| {
                    let center = j as f64 / ratio;
                    let lo = (center - half_width).ceil().max(0.0) as usize;
                    let hi = ((center + half_width).floor() as usize).min(x.len().saturating_sub(1));
                    let mut acc = 0.0;
                    for (i, &s) in x.iter().enumerate().take(hi + 1).skip(lo) {
                        let d = i as f64 - center;
                        let w = 0.5 + 0.5 * (PI * d / half_width).cos();
                        acc += s * cutoff * sinc(cutoff * d) * w;
                    }
                    acc
                })
                .collect()
        })
        .collect();
    AudioClip::new(channels, target_rate).expect("resampling preserves channel layout")
}
