//! Inference: mixture → mask → activation-weighted magnitude → waveform.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::EvalSong;
use crate::dsp::{istft_with_phase, stft, AudioClip, FrameConfig, MagSpectrogram, PhaseSpectrogram, WavFormat};
use crate::labels::{
    binarize, energy_activation, median_smooth, ActivationCurve, ActivationKind, DEFAULT_SMOOTH_KERNEL,
    DEFAULT_THRESHOLD,
};
use crate::model::{forward, layers::sigmoid, predicted_spectrogram, Mask, Mode, SeparatorParams, MIN_FRAMES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSource {
    #[default]
    Predicted,
    GroundTruth,
    AllOnes,
}

impl std::str::FromStr for ActivationSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(Self::Predicted),
            "ground_truth" | "ground-truth" => Ok(Self::GroundTruth),
            "all_ones" | "all-ones" => Ok(Self::AllOnes),
            other => Err(Error::parse("activation source", format!("unknown value {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub use_activation_weight: bool,
    pub smooth_kernel_frames: usize,
    pub activation_threshold: f64,
    pub activation_source: ActivationSource,
    pub segment_seconds: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            use_activation_weight: true,
            smooth_kernel_frames: DEFAULT_SMOOTH_KERNEL,
            activation_threshold: DEFAULT_THRESHOLD,
            activation_source: ActivationSource::Predicted,
            segment_seconds: 12.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.activation_threshold > 0.0 && self.activation_threshold < 1.0) {
            return Err(Error::Config(format!(
                "activation_threshold must be in (0,1), got {}",
                self.activation_threshold
            )));
        }
        if self.smooth_kernel_frames.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "smooth_kernel_frames must be odd, got {}",
                self.smooth_kernel_frames
            )));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Multiplies column `t` of `mag` by `act[t]`.
pub fn apply_activation_weight(mag: &MagSpectrogram, act: &ActivationCurve) -> Result<MagSpectrogram> {
    if act.len() != mag.frames() {
        return Err(Error::Shape(format!(
            "{} activation frames for {} spectrogram frames",
            act.len(),
            mag.frames()
        )));
    }
    if !act.is_binary() {
        return Err(Error::Config("activation weight must be a binary curve".into()));
    }
    let w = act.values();
    mag.map(|_, t, v| v * w[t])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separation {
    pub estimate: AudioClip,
    /// Binary curve that weighted the estimate (all ones when unweighted).
    pub act_used: ActivationCurve,
    /// Per-frame classifier confidence (max over channels); absent for fixed masks.
    pub act_raw: Option<ActivationCurve>,
}

/// Network mask and logits for one channel, run segment by segment.
///
/// Segments are whole runs of STFT frames, so the result lines up with a
/// single transform of the full signal. A trailing segment shorter than the
/// network minimum is merged into the one before it.
fn channel_mask(
    params: &SeparatorParams,
    mag: &MagSpectrogram,
    segment_frames: usize,
) -> Result<(Mask, Vec<f64>)> {
    let (bins, frames) = mag.shape();
    if frames < MIN_FRAMES {
        return Err(Error::Shape(format!(
            "mixture spans {frames} frames; at least {MIN_FRAMES} are needed"
        )));
    }
    let seg = segment_frames.max(MIN_FRAMES);
    let mut bounds = Vec::new();
    let mut s = 0;
    while s < frames {
        let e = (s + seg).min(frames);
        bounds.push((s, e));
        s = e;
    }
    if bounds.len() > 1 && bounds.last().map(|&(s, e)| e - s) < Some(MIN_FRAMES) {
        let (_, e) = bounds.pop().unwrap();
        bounds.last_mut().unwrap().1 = e;
    }
    let parts = bounds
        .iter()
        .map(|&(s, e)| {
            let piece = mag.slice_frames(s, e)?;
            forward(params, &piece, Mode::Eval)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mask = vec![0.0; bins * frames];
    let mut logits = Vec::with_capacity(frames);
    for (&(s, e), out) in bounds.iter().zip(&parts) {
        let w = e - s;
        for b in 0..bins {
            for t in 0..w {
                mask[b * frames + s + t] = out.mask.get(b, t);
            }
        }
        logits.extend_from_slice(&out.activation_logits);
    }
    Ok((Mask::new(mask, bins, frames)?, logits))
}

fn ones(frames: usize, frame_rate: f64, instrument: &str) -> Result<ActivationCurve> {
    ActivationCurve::new(vec![1.0; frames], frame_rate, instrument, ActivationKind::Binary)
}

/// The binary weight selected by `cfg` for a signal of `frames` frames.
fn weight_curve(
    cfg: &InferenceConfig,
    raw: Option<&ActivationCurve>,
    oracle: Option<&ActivationCurve>,
    frames: usize,
    frame_rate: f64,
    instrument: &str,
) -> Result<ActivationCurve> {
    if !cfg.use_activation_weight {
        return ones(frames, frame_rate, instrument);
    }
    let binary = match cfg.activation_source {
        ActivationSource::AllOnes => return ones(frames, frame_rate, instrument),
        ActivationSource::Predicted => {
            let raw = raw.ok_or_else(|| Error::Config("predicted activations need a trained model".into()))?;
            binarize(raw, cfg.activation_threshold)?
        }
        ActivationSource::GroundTruth => {
            let oracle = oracle.ok_or_else(|| Error::Config("ground-truth activation source needs oracle labels".into()))?;
            if oracle.is_binary() {
                oracle.clone()
            } else {
                binarize(oracle, cfg.activation_threshold)?
            }
        }
    };
    if binary.len() != frames {
        return Err(Error::Shape(format!(
            "{} activation frames for {frames} spectrogram frames",
            binary.len()
        )));
    }
    median_smooth(&binary, cfg.smooth_kernel_frames)
}

struct ChannelPass {
    mag: MagSpectrogram,
    phase: PhaseSpectrogram,
    mask: Mask,
}

fn finish(
    passes: Vec<ChannelPass>,
    weight: &ActivationCurve,
    len: usize,
    sample_rate: u32,
) -> Result<AudioClip> {
    let channels = passes
        .into_iter()
        .map(|p| {
            let pred = predicted_spectrogram(&p.mask, &p.mag)?;
            let weighted = apply_activation_weight(&pred, weight)?;
            Ok(istft_with_phase(&weighted, &p.phase, Some(len))?.into_channels().remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    AudioClip::new(channels, sample_rate)
}

fn channel_spectra(mixture: &AudioClip, frame: &FrameConfig) -> Result<Vec<(MagSpectrogram, PhaseSpectrogram)>> {
    if mixture.is_empty() {
        return Err(Error::Empty("mixture"));
    }
    mixture
        .channels()
        .iter()
        .map(|c| stft(&AudioClip::mono(c.clone(), mixture.sample_rate())?, frame))
        .collect()
}

/// Separates `instrument` from a mixture with a trained model.
///
/// Every channel runs through the network on its own; their binarized,
/// smoothed activations are OR-combined so all channels share one weight.
pub fn separate(
    params: &SeparatorParams,
    mixture: &AudioClip,
    frame: &FrameConfig,
    cfg: &InferenceConfig,
    instrument: &str,
    oracle: Option<&ActivationCurve>,
) -> Result<Separation> {
    cfg.validate()?;
    let spectra = channel_spectra(mixture, frame)?;
    let frames = spectra[0].0.frames();
    let frame_rate = frame.frame_rate();
    let segment_frames = ((cfg.segment_seconds * frame.sample_rate as f64) / frame.hop_size as f64).round() as usize;

    let mut passes = Vec::with_capacity(spectra.len());
    let mut raw_max = vec![0.0f64; frames];
    let mut weight: Option<ActivationCurve> = None;
    for (mag, phase) in spectra {
        let (mask, logits) = channel_mask(params, &mag, segment_frames)?;
        let conf: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        for (m, c) in raw_max.iter_mut().zip(&conf) {
            *m = m.max(*c);
        }
        let raw = ActivationCurve::confidence(conf, frame_rate, instrument)?;
        let w = weight_curve(cfg, Some(&raw), oracle, frames, frame_rate, instrument)?;
        weight = Some(match weight {
            Some(prev) => prev.or(&w)?,
            None => w,
        });
        passes.push(ChannelPass { mag, phase, mask });
    }
    let weight = weight.expect("at least one channel");
    let estimate = finish(passes, &weight, mixture.len(), mixture.sample_rate())?;
    Ok(Separation {
        estimate,
        act_used: weight,
        act_raw: Some(ActivationCurve::confidence(raw_max, frame_rate, instrument)?),
    })
}

/// Same pipeline with a fixed mask (shared by all channels) in place of the
/// network. Used for oracle studies; `Predicted` activations are unavailable.
pub fn separate_with_mask(
    mask: &Mask,
    mixture: &AudioClip,
    frame: &FrameConfig,
    cfg: &InferenceConfig,
    instrument: &str,
    oracle: Option<&ActivationCurve>,
) -> Result<Separation> {
    cfg.validate()?;
    let spectra = channel_spectra(mixture, frame)?;
    let frames = spectra[0].0.frames();
    let weight = weight_curve(cfg, None, oracle, frames, frame.frame_rate(), instrument)?;
    let passes = spectra
        .into_iter()
        .map(|(mag, phase)| ChannelPass {
            mag,
            phase,
            mask: mask.clone(),
        })
        .collect();
    let estimate = finish(passes, &weight, mixture.len(), mixture.sample_rate())?;
    Ok(Separation {
        estimate,
        act_used: weight,
        act_raw: None,
    })
}

/// Binary ground-truth activation of a reference stem (channels OR-combined).
pub fn reference_activation(stem: &AudioClip, frame: &FrameConfig, instrument: &str, threshold: f64) -> Result<ActivationCurve> {
    let mut out: Option<ActivationCurve> = None;
    for c in stem.channels() {
        let clip = AudioClip::mono(c.clone(), stem.sample_rate())?;
        let b = binarize(&energy_activation(&clip, frame, instrument)?, threshold)?;
        out = Some(match out {
            Some(prev) => prev.or(&b)?,
            None => b,
        });
    }
    out.ok_or(Error::Empty("reference stem"))
}

pub fn estimate_path(out_dir: &Path, song: &str, instrument: &str) -> PathBuf {
    out_dir.join(song).join(format!("{instrument}_estimate.wav"))
}

pub fn activation_paths(out_dir: &Path, song: &str, instrument: &str) -> (PathBuf, PathBuf) {
    let dir = out_dir.join(song);
    (
        dir.join(format!("{instrument}_activation_raw.csv")),
        dir.join(format!("{instrument}_activation.csv")),
    )
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct BatchReport {
    pub written: Vec<PathBuf>,
    /// `(song, message)` for every song that could not be processed.
    pub failures: Vec<(String, String)>,
}

/// Writes the separation output of one song.
pub fn write_separation(out_dir: &Path, song: &str, instrument: &str, sep: &Separation) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(song);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let wav = estimate_path(out_dir, song, instrument);
    crate::dsp::write_wav(&wav, &sep.estimate, WavFormat::Float32)?;
    let (raw_path, used_path) = activation_paths(out_dir, song, instrument);
    let mut written = vec![wav];
    if let Some(raw) = &sep.act_raw {
        raw.write_csv(&raw_path)?;
        written.push(raw_path);
    }
    sep.act_used.write_csv(&used_path)?;
    written.push(used_path);
    Ok(written)
}

/// Separates every song in parallel. Failures are collected per song and the
/// rest of the batch continues.
pub fn batch_separate(
    params: &SeparatorParams,
    songs: &[EvalSong],
    frame: &FrameConfig,
    cfg: &InferenceConfig,
    instrument: &str,
    out_dir: &Path,
) -> BatchReport {
    let results: Vec<(String, Result<Vec<PathBuf>>)> = songs
        .par_iter()
        .map(|song| {
            let run = || -> Result<Vec<PathBuf>> {
                let oracle = match cfg.activation_source {
                    ActivationSource::GroundTruth => {
                        let src = song
                            .source(instrument)
                            .ok_or_else(|| Error::Config(format!("song {} has no {instrument} stem", song.song_id)))?;
                        Some(reference_activation(&src, frame, instrument, cfg.activation_threshold)?)
                    }
                    _ => None,
                };
                let sep = separate(params, &song.mixture, frame, cfg, instrument, oracle.as_ref())?;
                write_separation(out_dir, &song.song_id, instrument, &sep)
            };
            (song.song_id.clone(), run())
        })
        .collect();
    let mut report = BatchReport::default();
    for (song, r) in results {
        match r {
            Ok(paths) => report.written.extend(paths),
            Err(e) => {
                log::warn!("song {song}: {e}");
                report.failures.push((song, e.to_string()));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests;
