use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{reflect_index, AudioClip, FrameConfig, MagSpectrogram, PhaseSpectrogram, WindowFunction};
use crate::error::{Error, Result};

/// Analysis/synthesis window of `cfg.window_size` samples.
pub fn window(cfg: &FrameConfig) -> Vec<f64> {
    let n = cfg.window_size;
    match cfg.window_function {
        WindowFunction::Hann => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect(),
    }
}

fn padded(samples: &[f64], cfg: &FrameConfig) -> Vec<f64> {
    if !cfg.center_pad {
        return samples.to_vec();
    }
    let pad = (cfg.window_size / 2) as isize;
    let n = samples.len();
    (-pad..n as isize + pad)
        .map(|i| samples[reflect_index(i, n)])
        .collect()
}

fn plan(cfg: &FrameConfig, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(cfg.window_size)
    } else {
        planner.plan_fft_forward(cfg.window_size)
    }
}

/// Short-time Fourier transform of a mono clip into magnitude and phase planes.
pub fn stft(clip: &AudioClip, cfg: &FrameConfig) -> Result<(MagSpectrogram, PhaseSpectrogram)> {
    cfg.validate()?;
    if clip.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip sample rate {} does not match frame config {}",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    if !clip.is_mono() {
        return Err(Error::Config(
            "stft expects a mono clip; downmix or split channels first".into(),
        ));
    }
    let frames = cfg.num_frames(clip.len());
    let bins = cfg.num_bins();
    let mut mag = vec![0.0; bins * frames];
    let mut phase = vec![0.0; bins * frames];
    if frames > 0 {
        let x = padded(clip.samples(), cfg);
        let win = window(cfg);
        let fft = plan(cfg, false);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.window_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * cfg.hop_size;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(x[start + i] * win[i], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (b, z) in buf.iter().take(bins).enumerate() {
                mag[b * frames + t] = z.norm();
                phase[b * frames + t] = z.im.atan2(z.re);
            }
        }
    }
    Ok((
        MagSpectrogram::new(mag, bins, frames, *cfg)?,
        PhaseSpectrogram::new(phase, bins, frames, *cfg)?,
    ))
}

/// Inverse transform of `mag · e^{i·phase}` by weighted overlap-add.
///
/// Without `length` the output spans `(frames - 1) · hop` samples, which is
/// within one hop of the analyzed length; with it, the output is trimmed or
/// zero-extended to exactly `length`.
pub fn istft_with_phase(
    mag: &MagSpectrogram,
    phase: &PhaseSpectrogram,
    length: Option<usize>,
) -> Result<AudioClip> {
    if mag.shape() != phase.shape() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs phase {:?}",
            mag.shape(),
            phase.shape()
        )));
    }
    if mag.config() != phase.config() {
        return Err(Error::Config(
            "magnitude and phase come from different frame configs".into(),
        ));
    }
    let cfg = *mag.config();
    let frames = mag.frames();
    let bins = mag.bins();
    let n_win = cfg.window_size;
    let hop = cfg.hop_size;
    let natural = if frames == 0 {
        0
    } else if cfg.center_pad {
        (frames - 1) * hop
    } else {
        (frames - 1) * hop + n_win
    };
    let out_len = length.unwrap_or(natural);
    if frames == 0 {
        return AudioClip::mono(vec![0.0; out_len], cfg.sample_rate);
    }

    let win = window(&cfg);
    let ifft = plan(&cfg, true);
    let total = (frames - 1) * hop + n_win;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_win];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let scale = 1.0 / n_win as f64;
    for t in 0..frames {
        for b in 0..bins {
            buf[b] = Complex64::from_polar(mag.get(b, t), phase.get(b, t));
        }
        // Hermitian completion; DC and Nyquist must be real for a real signal.
        buf[0].im = 0.0;
        buf[bins - 1].im = 0.0;
        for b in bins..n_win {
            buf[b] = buf[n_win - b].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * hop;
        for i in 0..n_win {
            acc[start + i] += buf[i].re * scale * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let offset = if cfg.center_pad { n_win / 2 } else { 0 };
    let samples = (0..out_len)
        .map(|i| {
            let j = i + offset;
            if j < total && norm[j] > 1e-10 {
                acc[j] / norm[j]
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::mono(samples, cfg.sample_rate)
}
