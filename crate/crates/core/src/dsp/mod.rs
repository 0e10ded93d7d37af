//! Time-frequency analysis/synthesis and loudness utilities.
//!
//! Everything here works in `f64`. Spectrograms are stored bins-major
//! (`values[bin * frames + frame]`), which is also the `[freq, time]` layout the
//! model consumes.

mod resample;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use resample::resample;
pub use stft::{istft_with_phase, stft, window};
pub use wav::{read_wav, write_wav, WavFormat};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowFunction {
    /// Periodic Hann; satisfies COLA at 50% and 75% overlap.
    #[default]
    Hann,
}

/// Analysis parameters shared by every spectrogram in a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub window_function: WindowFunction,
    pub center_pad: bool,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window_size: 4096,
            hop_size: 1024,
            window_function: WindowFunction::Hann,
            center_pad: true,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.window_size < 2 || !self.window_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window_size must be even and >= 2, got {}",
                self.window_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size {
            return Err(Error::Config(format!(
                "hop_size must lie in 1..={}, got {}",
                self.window_size, self.hop_size
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Frames per second of the spectrogram time axis.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    /// Number of analysis frames for a signal of `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else if self.center_pad {
            n / self.hop_size + 1
        } else if n < self.window_size {
            0
        } else {
            (n - self.window_size) / self.hop_size + 1
        }
    }
}

/// Time-domain samples, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::Config(format!(
                "audio clips carry 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            channels: vec![vec![0.0; len]],
            sample_rate,
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_mono(&self) -> bool {
        self.channels.len() == 1
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// First channel; the whole signal for mono clips.
    pub fn samples(&self) -> &[f64] {
        &self.channels[0]
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|s| s * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn is_silent(&self) -> bool {
        self.channels.iter().flatten().all(|&s| s == 0.0)
    }

    /// Sample-wise sum. Both clips must agree in rate, channel count and length.
    pub fn add(&self, other: &AudioClip) -> Result<AudioClip> {
        if self.sample_rate != other.sample_rate
            || self.num_channels() != other.num_channels()
            || self.len() != other.len()
        {
            return Err(Error::Shape(format!(
                "cannot add {}ch/{}/{}Hz to {}ch/{}/{}Hz",
                other.num_channels(),
                other.len(),
                other.sample_rate,
                self.num_channels(),
                self.len(),
                self.sample_rate
            )));
        }
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        Ok(AudioClip {
            channels,
            sample_rate: self.sample_rate,
        })
    }
}

/// A `[bins × frames]` plane tied to the [`FrameConfig`] that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    values: Vec<f64>,
    bins: usize,
    frames: usize,
    config: FrameConfig,
}

impl Plane {
    fn from_parts(values: Vec<f64>, bins: usize, frames: usize, config: FrameConfig) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(Error::Shape(format!(
                "{} values for a {bins}x{frames} plane",
                values.len()
            )));
        }
        if bins != config.num_bins() {
            return Err(Error::Shape(format!(
                "{bins} bins but window {} implies {}",
                config.window_size,
                config.num_bins()
            )));
        }
        Ok(Self {
            values,
            bins,
            frames,
            config,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }

    pub fn config(&self) -> &FrameConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Copy of one time column.
    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }
}

/// Non-negative magnitude plane.
#[derive(Debug, Clone, PartialEq)]
pub struct MagSpectrogram(Plane);

/// Phase plane in radians, values in `[-π, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrogram(Plane);

impl std::ops::Deref for MagSpectrogram {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

impl std::ops::Deref for PhaseSpectrogram {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

impl MagSpectrogram {
    pub fn new(values: Vec<f64>, bins: usize, frames: usize, config: FrameConfig) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(
                "magnitudes must be finite and non-negative".into(),
            ));
        }
        Plane::from_parts(values, bins, frames, config).map(Self)
    }

    pub fn zeros(frames: usize, config: FrameConfig) -> Self {
        let bins = config.num_bins();
        Self(Plane {
            values: vec![0.0; bins * frames],
            bins,
            frames,
            config,
        })
    }

    /// Elementwise map; `f` must keep values non-negative.
    pub fn map(&self, mut f: impl FnMut(usize, usize, f64) -> f64) -> Result<Self> {
        let frames = self.frames;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / frames, i % frames, v))
            .collect();
        Self::new(values, self.bins, self.frames, self.config)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0.values
    }

    /// Frames `start..end` as a spectrogram of their own.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames {
            return Err(Error::Shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        let w = end - start;
        let mut values = Vec::with_capacity(self.bins * w);
        for b in 0..self.bins {
            let row = b * self.frames;
            values.extend_from_slice(&self.values[row + start..row + end]);
        }
        Ok(Self(Plane {
            values,
            bins: self.bins,
            frames: w,
            config: self.config,
        }))
    }

    /// Sum of squared magnitudes per frame.
    pub fn frame_energies(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.frames];
        for b in 0..self.bins {
            for (t, e) in out.iter_mut().enumerate() {
                let v = self.get(b, t);
                *e += v * v;
            }
        }
        out
    }
}

impl PhaseSpectrogram {
    pub fn new(values: Vec<f64>, bins: usize, frames: usize, config: FrameConfig) -> Result<Self> {
        let pi = std::f64::consts::PI;
        if values.iter().any(|v| !(-pi..=pi).contains(v)) {
            return Err(Error::Config("phase values must lie in [-pi, pi]".into()));
        }
        Plane::from_parts(values, bins, frames, config).map(Self)
    }
}

/// Index into a signal of length `n` with symmetric (edge-excluded) reflection,
/// repeated as often as needed.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Channel mean; mono input is returned unchanged.
pub fn downmix_mono(clip: &AudioClip) -> AudioClip {
    if clip.is_mono() {
        return clip.clone();
    }
    let k = clip.num_channels() as f64;
    let samples = (0..clip.len())
        .map(|i| clip.channels.iter().map(|c| c[i]).sum::<f64>() / k)
        .collect();
    AudioClip {
        channels: vec![samples],
        sample_rate: clip.sample_rate,
    }
}

/// Root mean square over all channels.
pub fn rms(clip: &AudioClip) -> Result<f64> {
    if clip.is_empty() {
        return Err(Error::Empty("rms of an empty clip"));
    }
    let count = (clip.len() * clip.num_channels()) as f64;
    let sum_sq: f64 = clip.channels.iter().flatten().map(|s| s * s).sum();
    Ok((sum_sq / count).sqrt())
}

/// What [`normalize_loudness`] did to its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoudnessOutcome {
    Scaled { gain: f64 },
    /// Input was silent (or empty) and came back untouched.
    Unscalable,
}

pub fn normalize_loudness(clip: &AudioClip, target_rms: f64) -> Result<(AudioClip, LoudnessOutcome)> {
    if !(target_rms > 0.0 && target_rms.is_finite()) {
        return Err(Error::Config(format!(
            "target_rms must be positive, got {target_rms}"
        )));
    }
    if clip.is_empty() {
        return Ok((clip.clone(), LoudnessOutcome::Unscalable));
    }
    let current = rms(clip)?;
    if current == 0.0 {
        return Ok((clip.clone(), LoudnessOutcome::Unscalable));
    }
    let gain = target_rms / current;
    Ok((clip.scaled(gain), LoudnessOutcome::Scaled { gain }))
}
