//! Deterministic toy material: a small multitrack dataset (tones, chirps,
//! noise-burst drums, silence regions) and a few hand-built scenes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{write_split_file, DatasetIndex, Split, MANIFEST_FILE, SPLIT_FILE};
use crate::dsp::{write_wav, AudioClip, FrameConfig, MagSpectrogram, WavFormat};
use crate::labels::ActivationCurve;
use crate::model::Example;
use crate::{Error, Result};

pub const INSTRUMENTS: [&str; 4] = ["bass", "drums", "other", "vocals"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub train_songs: usize,
    pub validation_songs: usize,
    pub test_songs: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            train_songs: 5,
            validation_songs: 1,
            test_songs: 2,
            seconds: 8.0,
            sample_rate: 8000,
            seed: 0,
        }
    }
}

/// Frame settings matched to the fixture sample rate.
pub fn fixture_frame_config(sample_rate: u32) -> FrameConfig {
    FrameConfig {
        sample_rate,
        window_size: 256,
        hop_size: 64,
        ..FrameConfig::default()
    }
}

fn midi_hz(note: f64) -> f64 {
    440.0 * 2f64.powf((note - 69.0) / 12.0)
}

/// Melody of short notes with three harmonics and silent gaps; the first
/// second-and-a-bit is always silent.
fn vocals(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let note_len = (0.5 * sr) as usize;
    let lead_in = ((1.0 + rng.random_range(0.0..0.5)) * sr) as usize;
    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let mut start = lead_in;
    while start < n {
        let end = (start + note_len).min(n);
        let rest = rng.random_bool(0.25);
        let f0 = midi_hz(rng.random_range(60..76) as f64);
        for (k, s) in out[start..end].iter_mut().enumerate() {
            let env = (k as f64 / (0.02 * sr)).min(1.0) * ((end - start - k) as f64 / (0.02 * sr)).min(1.0);
            phase += 2.0 * PI * f0 / sr;
            if !rest {
                *s = env * (phase.sin() + 0.5 * (2.0 * phase).sin() + 0.25 * (3.0 * phase).sin()) * 0.3;
            }
        }
        start = end;
    }
    out
}

/// Repeating upward chirps in the bass register.
fn bass(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let period = rng.random_range(0.8..1.6);
    let (f_lo, f_hi) = (rng.random_range(50.0..80.0), rng.random_range(120.0..200.0));
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = (i as f64 / sr) % period;
            let f = f_lo + (f_hi - f_lo) * t / period;
            phase += 2.0 * PI * f / sr;
            0.4 * phase.sin()
        })
        .collect()
}

/// Exponentially decaying white-noise bursts on a beat grid.
fn drums(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let beat = (rng.random_range(0.2..0.35) * sr) as usize;
    let decay = rng.random_range(0.02..0.06) * sr;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let amp = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.3..0.6) };
        for k in 0..beat.min(n - start) {
            out[start + k] = amp * (-(k as f64) / decay).exp() * rng.random_range(-1.0..1.0);
        }
        start += beat;
    }
    out
}

/// Sustained two-note chords, with one silent chord slot in four.
fn other(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let chord_len = (2.0 * sr) as usize;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let end = (start + chord_len).min(n);
        if !rng.random_bool(0.25) {
            let root = rng.random_range(48..60) as f64;
            let (f1, f2) = (midi_hz(root), midi_hz(root + 7.0));
            for (k, s) in out[start..end].iter_mut().enumerate() {
                let t = k as f64 / sr;
                *s = 0.15 * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin());
            }
        }
        start = end;
    }
    out
}

/// All four stems of one song, in [`INSTRUMENTS`] order.
pub fn song_stems(song_index: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<(String, AudioClip)> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(song_index as u64);
    let makers: [fn(usize, f64, &mut ChaCha8Rng) -> Vec<f64>; 4] = [bass, drums, other, vocals];
    INSTRUMENTS
        .iter()
        .zip(makers)
        .map(|(name, make)| {
            let clip = AudioClip::mono(make(n, sr, &mut rng), sample_rate).expect("finite samples");
            (name.to_string(), clip)
        })
        .collect()
}

pub fn song_id(index: usize) -> String {
    format!("song{index:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSummary {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Split>,
    pub files: Vec<PathBuf>,
}

/// Writes `<root>/<song>/<instrument>.wav`, the split file and the manifest.
pub fn write_fixtures(root: &Path, cfg: &FixtureConfig) -> Result<FixtureSummary> {
    if cfg.train_songs == 0 || cfg.validation_songs == 0 || cfg.test_songs == 0 {
        return Err(Error::Config("fixtures need at least one song per split".into()));
    }
    if !(cfg.seconds > 0.0) {
        return Err(Error::Config("fixture duration must be positive".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut splits = BTreeMap::new();
    let mut files = Vec::new();
    let layout = [
        (Split::Train, cfg.train_songs),
        (Split::Validation, cfg.validation_songs),
        (Split::Test, cfg.test_songs),
    ];
    let mut index = 0;
    for (split, count) in layout {
        for _ in 0..count {
            let id = song_id(index);
            let dir = root.join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (inst, clip) in song_stems(index, cfg.seconds, cfg.sample_rate, cfg.seed) {
                let path = dir.join(format!("{inst}.wav"));
                write_wav(&path, &clip, WavFormat::Float32)?;
                files.push(path);
            }
            splits.insert(id, split);
            index += 1;
        }
    }
    let split_path = root.join(SPLIT_FILE);
    write_split_file(&split_path, &splits)?;
    files.push(split_path.clone());
    let manifest = root.join(MANIFEST_FILE);
    DatasetIndex::scan(root, &split_path)?.save_json(&manifest)?;
    files.push(manifest);
    Ok(FixtureSummary {
        root: root.to_path_buf(),
        splits,
        files,
    })
}

/// A target that stays silent for the first `onset_frame` frames over
/// broadband accompaniment.
#[derive(Debug, Clone)]
pub struct LateEntryScene {
    pub mixture: AudioClip,
    pub target: AudioClip,
    pub accompaniment: AudioClip,
    pub onset_frame: usize,
}

/// The target starts one window after frame `onset_frame` begins, so no
/// analysis window up to that frame sees any of it.
pub fn late_entry_scene(frame: &FrameConfig, onset_frame: usize, total_frames: usize, seed: u64) -> Result<LateEntryScene> {
    if total_frames <= onset_frame + 8 {
        return Err(Error::Config("scene needs frames after the onset".into()));
    }
    let sr = frame.sample_rate as f64;
    let n = total_frames * frame.hop_size;
    let onset = onset_frame * frame.hop_size + frame.window_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target: Vec<f64> = (0..n)
        .map(|i| {
            if i < onset {
                0.0
            } else {
                let t = (i - onset) as f64 / sr;
                0.3 * (2.0 * PI * 440.0 * t).sin() + 0.15 * (2.0 * PI * 660.0 * t).sin()
            }
        })
        .collect();
    let accompaniment: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
    let mixture: Vec<f64> = target.iter().zip(&accompaniment).map(|(a, b)| a + b).collect();
    Ok(LateEntryScene {
        mixture: AudioClip::mono(mixture, frame.sample_rate)?,
        target: AudioClip::mono(target, frame.sample_rate)?,
        accompaniment: AudioClip::mono(accompaniment, frame.sample_rate)?,
        onset_frame,
    })
}

/// Magnitude-domain examples: a harmonic comb on every third bin in random
/// active frames, over low broadband noise. Labels mark the active frames.
pub fn overfit_batch(count: usize, frames: usize, seed: u64) -> Vec<Example> {
    let cfg = FrameConfig {
        sample_rate: 8000,
        window_size: 64,
        hop_size: 16,
        ..FrameConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = cfg.num_bins();
    (0..count)
        .map(|_| {
            let mut mix = vec![0.0; bins * frames];
            let mut target = vec![0.0; bins * frames];
            let mut labels = vec![0.0; frames];
            for t in 0..frames {
                let active = rng.random_bool(0.6);
                labels[t] = if active { 1.0 } else { 0.0 };
                for b in 0..bins {
                    let noise = rng.random_range(0.0..0.3);
                    let tone = if active && b % 3 == 0 { 2.0 } else { 0.0 };
                    mix[b * frames + t] = noise + tone;
                    target[b * frames + t] = tone;
                }
            }
            Example {
                mix: MagSpectrogram::new(mix, bins, frames, cfg).expect("valid magnitudes"),
                target: MagSpectrogram::new(target, bins, frames, cfg).expect("valid magnitudes"),
                labels: ActivationCurve::binary(labels, cfg.frame_rate(), "comb").expect("binary labels"),
            }
        })
        .collect()
}
