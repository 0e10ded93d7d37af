//! Dataset ingestion and the remix-augmentation sampler.
//!
//! A dataset root holds one directory per song with one WAV per stem
//! (`<song>/<instrument>.wav`) and a split file listing `song_id<TAB>split`.
//! Training examples are assembled on the fly from two pools: stems of the
//! target instrument and everything else.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, downmix_mono, normalize_loudness, AudioClip, FrameConfig};
use crate::error::{Error, Result};
use crate::labels::{binarize, energy_activation, ActivationCurve, DEFAULT_THRESHOLD};

pub const SPLIT_FILE: &str = "splits.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "validation" | "valid" | "val" => Ok(Split::Validation),
            "test" | "testing" => Ok(Split::Test),
            other => Err(Error::parse("split", format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// How multichannel stems enter the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    /// Average channels into one.
    #[default]
    Downmix,
    /// Keep channels; training draws one channel per example, inference runs
    /// each channel through the model separately.
    PerChannel,
}

/// One stem file of one song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub song_id: String,
    pub instrument: String,
    pub audio_path: PathBuf,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemManifest {
    pub entries: Vec<TrackEntry>,
    pub split: Split,
    pub target_instrument: Option<String>,
}

/// On-disk manifest: `songs[] -> {id, split, stems[] -> {instrument, path}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub songs: Vec<SongRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub id: String,
    pub split: Split,
    pub stems: Vec<StemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemRecord {
    pub instrument: String,
    /// Relative to the dataset root unless absolute.
    pub path: PathBuf,
}

/// Parses `song_id<TAB>split` lines; blank lines and `#` comments are skipped.
pub fn read_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (song, split) = line.split_once('\t').ok_or_else(|| {
            Error::parse("split file", format!("line {}: expected song_id<TAB>split", i + 1))
        })?;
        out.insert(song.to_string(), split.parse()?);
    }
    Ok(out)
}

pub fn write_split_file(path: &Path, splits: &BTreeMap<String, Split>) -> Result<()> {
    let text: String = splits.iter().map(|(s, p)| format!("{s}\t{p}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl DatasetIndex {
    /// Indexes `<root>/<song>/<instrument>.wav` using the split file.
    ///
    /// Songs absent from the split file are skipped with a warning.
    pub fn scan(root: &Path, split_file: &Path) -> Result<Self> {
        let splits = read_split_file(split_file)?;
        let dir = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut song_dirs: Vec<PathBuf> = dir
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        song_dirs.sort();
        let mut songs = Vec::new();
        for song_dir in song_dirs {
            let id = song_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Some(&split) = splits.get(&id) else {
                log::warn!("song {id} has no split assignment; skipped");
                continue;
            };
            let mut stems: Vec<StemRecord> = std::fs::read_dir(&song_dir)
                .map_err(|e| Error::io(&song_dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .map(|p| StemRecord {
                    instrument: p.file_stem().unwrap().to_string_lossy().into_owned(),
                    path: PathBuf::from(&id).join(p.file_name().unwrap()),
                })
                .collect();
            stems.sort_by(|a, b| a.instrument.cmp(&b.instrument));
            if !stems.is_empty() {
                songs.push(SongRecord { id, split, stems });
            }
        }
        if songs.is_empty() {
            return Err(Error::Ingestion {
                offenders: vec![format!("{}: no songs with stems", root.display())],
            });
        }
        Ok(Self { songs })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn instruments(&self) -> BTreeSet<String> {
        self.songs
            .iter()
            .flat_map(|s| s.stems.iter().map(|t| t.instrument.clone()))
            .collect()
    }

    /// Validated entries of one split. Every stem must decode; offenders are
    /// reported together.
    pub fn manifest(&self, root: &Path, split: Split) -> Result<StemManifest> {
        let mut entries = Vec::new();
        let mut offenders = Vec::new();
        for song in self.songs.iter().filter(|s| s.split == split) {
            for stem in &song.stems {
                let path = if stem.path.is_absolute() {
                    stem.path.clone()
                } else {
                    root.join(&stem.path)
                };
                match hound::WavReader::open(&path) {
                    Ok(r) => {
                        let spec = r.spec();
                        let duration = r.duration() as f64 / spec.sample_rate as f64;
                        if duration > 0.0 {
                            entries.push(TrackEntry {
                                song_id: song.id.clone(),
                                instrument: stem.instrument.clone(),
                                audio_path: path,
                                duration,
                            });
                        } else {
                            offenders.push(format!("{}: zero duration", path.display()));
                        }
                    }
                    Err(e) => offenders.push(format!("{}: {e}", path.display())),
                }
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Ingestion { offenders });
        }
        Ok(StemManifest {
            entries,
            split,
            target_instrument: None,
        })
    }
}

/// Scans a dataset root and returns the validated manifest of `split`.
pub fn load_manifest(root: &Path, split_file: &Path, split: Split) -> Result<StemManifest> {
    if !split_file.exists() {
        return Err(Error::Ingestion {
            offenders: vec![format!("missing split file {}", split_file.display())],
        });
    }
    DatasetIndex::scan(root, split_file)?.manifest(root, split)
}

impl StemManifest {
    pub fn song_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.song_id.as_str()).collect()
    }

    pub fn has_instrument(&self, instrument: &str) -> bool {
        self.entries.iter().any(|e| e.instrument == instrument)
    }
}

/// Target-instrument stems and the accompaniment stems they get mixed with.
#[derive(Debug, Clone, PartialEq)]
pub struct Pools {
    pub target_instrument: String,
    pub target: Vec<TrackEntry>,
    pub accompaniment: Vec<TrackEntry>,
}

pub fn build_pools(manifest: &StemManifest, target_instrument: &str) -> Result<Pools> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest has no entries"));
    }
    let (target, accompaniment): (Vec<_>, Vec<_>) = manifest
        .entries
        .iter()
        .cloned()
        .partition(|e| e.instrument == target_instrument);
    if target.is_empty() {
        return Err(Error::Config(format!(
            "no stems of instrument {target_instrument:?} in the {} split",
            manifest.split
        )));
    }
    Ok(Pools {
        target_instrument: target_instrument.to_string(),
        target,
        accompaniment,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub gain_min: f64,
    pub gain_max: f64,
    pub chunk_seconds: f64,
    pub accomp_min: usize,
    pub accomp_max: usize,
    pub balance_rms: f64,
    pub seed: u64,
    pub channel_policy: ChannelPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gain_min: 0.25,
            gain_max: 1.25,
            chunk_seconds: 6.0,
            accomp_min: 1,
            accomp_max: 5,
            balance_rms: 0.1,
            seed: 0,
            channel_policy: ChannelPolicy::Downmix,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_min > 0.0 && self.gain_min <= self.gain_max) {
            return Err(Error::Config(format!(
                "gain range [{}, {}] invalid",
                self.gain_min, self.gain_max
            )));
        }
        if self.accomp_min < 1 || self.accomp_min > self.accomp_max {
            return Err(Error::Config(format!(
                "accompaniment count range [{}, {}] invalid",
                self.accomp_min, self.accomp_max
            )));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(Error::Config("chunk_seconds must be positive".into()));
        }
        if !(self.balance_rms > 0.0) {
            return Err(Error::Config("balance_rms must be positive".into()));
        }
        Ok(())
    }

    pub fn chunk_len(&self, sample_rate: u32) -> usize {
        (self.chunk_seconds * sample_rate as f64).round() as usize
    }
}

/// A stem decoded and loudness-balanced once, ready for repeated chunking.
#[derive(Debug, Clone)]
pub struct LoadedStem {
    pub entry: TrackEntry,
    pub clip: AudioClip,
}

/// Decodes a stem at `sample_rate`, applying the channel policy.
pub fn load_stem(entry: &TrackEntry, sample_rate: u32, policy: ChannelPolicy) -> Result<AudioClip> {
    let clip = dsp::read_wav(&entry.audio_path, sample_rate)?;
    Ok(match policy {
        ChannelPolicy::Downmix => downmix_mono(&clip),
        ChannelPolicy::PerChannel => clip,
    })
}

fn balance(clip: &AudioClip, target_rms: f64) -> Result<AudioClip> {
    Ok(normalize_loudness(clip, target_rms)?.0)
}

/// Audio-backed pools the sampler draws from.
#[derive(Debug, Clone)]
pub struct LoadedPools {
    pub target_instrument: String,
    pub target: Vec<LoadedStem>,
    pub accompaniment: Vec<LoadedStem>,
}

impl LoadedPools {
    pub fn load(pools: &Pools, sample_rate: u32, cfg: &AugmentConfig) -> Result<Self> {
        let load_all = |entries: &[TrackEntry]| -> Result<Vec<LoadedStem>> {
            let mut offenders = Vec::new();
            let mut out = Vec::new();
            for e in entries {
                match load_stem(e, sample_rate, cfg.channel_policy)
                    .and_then(|c| balance(&c, cfg.balance_rms))
                {
                    Ok(clip) => out.push(LoadedStem {
                        entry: e.clone(),
                        clip,
                    }),
                    Err(err) => offenders.push(format!("{}: {err}", e.audio_path.display())),
                }
            }
            if offenders.is_empty() {
                Ok(out)
            } else {
                Err(Error::Ingestion { offenders })
            }
        };
        Ok(Self {
            target_instrument: pools.target_instrument.clone(),
            target: load_all(&pools.target)?,
            accompaniment: load_all(&pools.accompaniment)?,
        })
    }

    /// Pools from in-memory clips; clips are balanced here as on load.
    pub fn from_clips(
        target_instrument: &str,
        target: Vec<AudioClip>,
        accompaniment: Vec<AudioClip>,
        cfg: &AugmentConfig,
    ) -> Result<Self> {
        let wrap = |clips: Vec<AudioClip>, instrument: &str| -> Result<Vec<LoadedStem>> {
            clips
                .into_iter()
                .enumerate()
                .map(|(i, clip)| {
                    Ok(LoadedStem {
                        entry: TrackEntry {
                            song_id: format!("mem{i}"),
                            instrument: instrument.to_string(),
                            audio_path: PathBuf::new(),
                            duration: clip.duration_seconds(),
                        },
                        clip: balance(&clip, cfg.balance_rms)?,
                    })
                })
                .collect()
        };
        Ok(Self {
            target_instrument: target_instrument.to_string(),
            target: wrap(target, target_instrument)?,
            accompaniment: wrap(accompaniment, "accompaniment")?,
        })
    }
}

/// One remixed training triple plus the draws that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub mixture: AudioClip,
    pub target: AudioClip,
    pub accompaniments: Vec<AudioClip>,
    pub activation: ActivationCurve,
    pub target_gain: f64,
    pub accomp_gains: Vec<f64>,
    /// True when some stem was shorter than the chunk and had to be looped.
    pub looped: bool,
}

/// Mono chunk of `len` samples starting at a uniform random offset; stems
/// shorter than `len` are looped from the start.
fn random_chunk(samples: &[f64], len: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, bool) {
    let n = samples.len();
    if n == 0 {
        return (vec![0.0; len], true);
    }
    if n < len {
        return ((0..len).map(|i| samples[i % n]).collect(), true);
    }
    let start = rng.random_range(0..=n - len);
    (samples[start..start + len].to_vec(), false)
}

pub fn sample_training_example(
    pools: &LoadedPools,
    cfg: &AugmentConfig,
    frame: &FrameConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    cfg.validate()?;
    if pools.target.is_empty() || pools.accompaniment.is_empty() {
        return Err(Error::Empty("sampler pools"));
    }
    let sr = frame.sample_rate;
    let len = cfg.chunk_len(sr);
    // one channel per example so target and accompaniment stay aligned
    let channel_pick: usize = match cfg.channel_policy {
        ChannelPolicy::Downmix => 0,
        ChannelPolicy::PerChannel => rng.random_range(0..2),
    };
    let mut looped = false;
    let mut draw = |stem: &LoadedStem, rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
        let ch = channel_pick.min(stem.clip.num_channels() - 1);
        let gain = rng.random_range(cfg.gain_min..=cfg.gain_max);
        let (chunk, was_looped) = random_chunk(stem.clip.channel(ch), len, rng);
        looped |= was_looped;
        (chunk.into_iter().map(|s| s * gain).collect(), gain)
    };

    let t_idx = rng.random_range(0..pools.target.len());
    let (target, target_gain) = draw(&pools.target[t_idx], rng);
    let k = rng.random_range(cfg.accomp_min..=cfg.accomp_max);
    let mut accompaniments = Vec::with_capacity(k);
    let mut accomp_gains = Vec::with_capacity(k);
    for _ in 0..k {
        let a_idx = rng.random_range(0..pools.accompaniment.len());
        let (a, g) = draw(&pools.accompaniment[a_idx], rng);
        accompaniments.push(a);
        accomp_gains.push(g);
    }
    let mut mix = target.clone();
    for a in &accompaniments {
        for (m, s) in mix.iter_mut().zip(a) {
            *m += s;
        }
    }
    let target = AudioClip::mono(target, sr)?;
    let activation = binarize(
        &energy_activation(&target, frame, &pools.target_instrument)?,
        DEFAULT_THRESHOLD,
    )?;
    Ok(TrainingExample {
        mixture: AudioClip::mono(mix, sr)?,
        target,
        accompaniments: accompaniments
            .into_iter()
            .map(|a| AudioClip::mono(a, sr))
            .collect::<Result<_>>()?,
        activation,
        target_gain,
        accomp_gains,
        looped,
    })
}

/// Independent RNG stream `worker` derived from `seed`.
pub fn substream(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}

/// A full-length, loudness-balanced evaluation song.
#[derive(Debug, Clone)]
pub struct EvalSong {
    pub song_id: String,
    pub mixture: AudioClip,
    /// `(instrument, balanced stem)`, in manifest order.
    pub stems: Vec<(String, AudioClip)>,
}

impl EvalSong {
    pub fn has_instrument(&self, instrument: &str) -> bool {
        self.stems.iter().any(|(i, _)| i == instrument)
    }

    /// Sum of all stems of `instrument` (several takes of one instrument are
    /// one source).
    pub fn source(&self, instrument: &str) -> Option<AudioClip> {
        sum_clips(self.stems.iter().filter(|(i, _)| i == instrument).map(|(_, c)| c))
    }

    /// Sum of all stems that are not `instrument`.
    pub fn rest(&self, instrument: &str) -> Option<AudioClip> {
        sum_clips(self.stems.iter().filter(|(i, _)| i != instrument).map(|(_, c)| c))
    }
}

fn sum_clips<'a>(mut clips: impl Iterator<Item = &'a AudioClip>) -> Option<AudioClip> {
    let first = clips.next()?.clone();
    Some(clips.fold(first, |acc, c| acc.add(c).expect("eval stems share a layout")))
}

/// Zero-pads to `len` samples and, if needed, duplicates mono to `channels`.
fn conform(clip: AudioClip, len: usize, channels: usize) -> AudioClip {
    let sr = clip.sample_rate();
    let mut chans = clip.into_channels();
    if chans.len() < channels {
        chans.push(chans[0].clone());
    }
    for c in &mut chans {
        c.resize(len, 0.0);
    }
    AudioClip::new(chans, sr).expect("conformed clip is valid")
}

/// Builds full-length evaluation songs containing `target_instrument`.
///
/// Each stem is balanced to `balance_rms`; no random gain or chunking. The
/// mixture is the sum of the balanced stems.
pub fn make_eval_set(
    manifest: &StemManifest,
    target_instrument: &str,
    sample_rate: u32,
    balance_rms: f64,
    policy: ChannelPolicy,
) -> Result<Vec<EvalSong>> {
    let mut by_song: BTreeMap<&str, Vec<&TrackEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_song.entry(e.song_id.as_str()).or_default().push(e);
    }
    let mut out = Vec::new();
    for (song_id, entries) in by_song {
        if !entries.iter().any(|e| e.instrument == target_instrument) {
            continue;
        }
        let mut stems = Vec::with_capacity(entries.len());
        for e in entries {
            let clip = balance(&load_stem(e, sample_rate, policy)?, balance_rms)?;
            stems.push((e.instrument.clone(), clip));
        }
        out.push(assemble_song(song_id.to_string(), stems));
    }
    Ok(out)
}

/// Aligns already-balanced stems and sums them into a mixture.
pub fn assemble_song(song_id: String, stems: Vec<(String, AudioClip)>) -> EvalSong {
    let len = stems.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let channels = stems.iter().map(|(_, c)| c.num_channels()).max().unwrap_or(1);
    let stems: Vec<(String, AudioClip)> = stems
        .into_iter()
        .map(|(i, c)| (i, conform(c, len, channels)))
        .collect();
    let mixture = sum_clips(stems.iter().map(|(_, c)| c)).expect("song has stems");
    EvalSong {
        song_id,
        mixture,
        stems,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{rms, write_wav, WavFormat};
    use std::f64::consts::PI;

    fn tone(freq: f64, secs: f64, sr: u32) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        AudioClip::mono(
            (0..n)
                .map(|i| 0.3 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    fn frame() -> FrameConfig {
        FrameConfig {
            sample_rate: 8000,
            window_size: 256,
            hop_size: 64,
            ..FrameConfig::default()
        }
    }

    /// `songs` x `instruments` layout with every song in `split`.
    fn write_dataset(root: &Path, songs: &[&str], instruments: &[&str], split: Split) {
        let mut splits = BTreeMap::new();
        for (k, s) in songs.iter().enumerate() {
            std::fs::create_dir_all(root.join(s)).unwrap();
            for (j, inst) in instruments.iter().enumerate() {
                let clip = tone(100.0 * (j + 1) as f64 + k as f64, 1.0, 8000);
                write_wav(root.join(s).join(format!("{inst}.wav")), &clip, WavFormat::Float32).unwrap();
            }
            splits.insert(s.to_string(), split);
        }
        write_split_file(&root.join(SPLIT_FILE), &splits).unwrap();
    }

    #[test]
    fn manifest_counts_entries() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["a", "b", "c"], &["vocals", "bass", "drums", "piano"], Split::Train);
        let m = load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Train).unwrap();
        assert_eq!(m.entries.len(), 12);
        assert!(m.entries.iter().all(|e| (e.duration - 1.0).abs() < 1e-9));
        let test = load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Test).unwrap();
        assert!(test.entries.is_empty());
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Train);
        assert!(matches!(empty, Err(Error::Ingestion { .. })));
        std::fs::write(dir.path().join(SPLIT_FILE), "").unwrap();
        assert!(load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Train).is_err());

        write_dataset(dir.path(), &["a"], &["vocals"], Split::Train);
        std::fs::write(dir.path().join("a").join("broken.wav"), b"not a wav").unwrap();
        match load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Train) {
            Err(Error::Ingestion { offenders }) => {
                assert_eq!(offenders.len(), 1);
                assert!(offenders[0].contains("broken.wav"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn index_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["s1", "s2"], &["vocals", "bass"], Split::Test);
        let idx = DatasetIndex::scan(dir.path(), &dir.path().join(SPLIT_FILE)).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        idx.save_json(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"songs\"") && text.contains("\"stems\"") && text.contains("\"instrument\""));
        assert_eq!(DatasetIndex::load_json(&p).unwrap(), idx);
    }

    fn entry(song: &str, inst: &str) -> TrackEntry {
        TrackEntry {
            song_id: song.into(),
            instrument: inst.into(),
            audio_path: PathBuf::from(format!("{song}/{inst}.wav")),
            duration: 1.0,
        }
    }

    #[test]
    fn pools_partition_by_instrument() {
        let mut entries = Vec::new();
        for s in ["a", "b", "c"] {
            for i in ["vocals", "bass", "drums", "other"] {
                entries.push(entry(s, i));
            }
        }
        let m = StemManifest {
            entries,
            split: Split::Train,
            target_instrument: None,
        };
        let p = build_pools(&m, "vocals").unwrap();
        assert_eq!((p.target.len(), p.accompaniment.len()), (3, 9));
        assert!(p.accompaniment.iter().all(|e| e.instrument != "vocals"));
        // songs appear in both pools only through different instruments
        assert!(p.accompaniment.iter().any(|e| e.song_id == "a"));
        assert!(build_pools(&m, "piano").is_err());
    }

    #[test]
    fn song_without_target_feeds_accompaniment_only() {
        let m = StemManifest {
            entries: vec![entry("a", "vocals"), entry("a", "bass"), entry("b", "bass")],
            split: Split::Train,
            target_instrument: None,
        };
        let p = build_pools(&m, "vocals").unwrap();
        assert!(p.target.iter().all(|e| e.song_id == "a"));
        assert!(p.accompaniment.iter().any(|e| e.song_id == "b"));
    }

    fn mem_pools(cfg: &AugmentConfig) -> LoadedPools {
        LoadedPools::from_clips(
            "vocals",
            vec![tone(440.0, 3.0, 8000), tone(660.0, 2.5, 8000)],
            vec![tone(110.0, 3.0, 8000), tone(220.0, 4.0, 8000), tone(330.0, 2.0, 8000)],
            cfg,
        )
        .unwrap()
    }

    fn short_cfg() -> AugmentConfig {
        AugmentConfig {
            chunk_seconds: 1.0,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn sampler_is_deterministic_and_additive() {
        let cfg = short_cfg();
        let pools = mem_pools(&cfg);
        let a = sample_training_example(&pools, &cfg, &frame(), &mut substream(9, 0)).unwrap();
        let b = sample_training_example(&pools, &cfg, &frame(), &mut substream(9, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mixture.len(), cfg.chunk_len(8000));
        assert_eq!(a.activation.len(), frame().num_frames(a.mixture.len()));
        // same summation order as the sampler: bitwise equality
        let mut sum = a.target.samples().to_vec();
        for acc in &a.accompaniments {
            for (s, v) in sum.iter_mut().zip(acc.samples()) {
                *s += v;
            }
        }
        assert_eq!(sum, a.mixture.samples());
        assert!((1..=5).contains(&a.accompaniments.len()));
    }

    #[test]
    fn unit_gain_single_accompaniment_is_exact_sum() {
        let cfg = AugmentConfig {
            gain_min: 1.0,
            gain_max: 1.0,
            accomp_min: 1,
            accomp_max: 1,
            chunk_seconds: 0.5,
            ..AugmentConfig::default()
        };
        let constant = |v: f64| AudioClip::mono(vec![v; 8000], 8000).unwrap();
        let pools = LoadedPools::from_clips("x", vec![constant(0.3)], vec![constant(-0.2)], &cfg).unwrap();
        let ex = sample_training_example(&pools, &cfg, &frame(), &mut substream(1, 0)).unwrap();
        // both balanced to 0.1 rms
        for (i, m) in ex.mixture.samples().iter().enumerate() {
            assert_eq!(*m, ex.target.samples()[i] + ex.accompaniments[0].samples()[i]);
            assert!((m - 0.0).abs() < 1e-12);
        }
        assert_eq!(ex.target_gain, 1.0);
    }

    #[test]
    fn silent_target_gives_zero_activation() {
        let cfg = short_cfg();
        let pools = LoadedPools::from_clips(
            "x",
            vec![AudioClip::silence(16_000, 8000)],
            vec![tone(200.0, 2.0, 8000)],
            &cfg,
        )
        .unwrap();
        let ex = sample_training_example(&pools, &cfg, &frame(), &mut substream(2, 0)).unwrap();
        assert!(ex.activation.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_stems_are_looped_and_flagged() {
        let cfg = AugmentConfig {
            chunk_seconds: 2.0,
            ..AugmentConfig::default()
        };
        let pools = LoadedPools::from_clips("x", vec![tone(300.0, 0.5, 8000)], vec![tone(500.0, 3.0, 8000)], &cfg).unwrap();
        let ex = sample_training_example(&pools, &cfg, &frame(), &mut substream(3, 0)).unwrap();
        assert!(ex.looped);
        assert_eq!(ex.target.len(), 16_000);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = short_cfg();
        let pools = mem_pools(&cfg);
        let base = sample_training_example(&pools, &cfg, &frame(), &mut substream(0, 0)).unwrap();
        for seed in 1..100 {
            let ex = sample_training_example(&pools, &cfg, &frame(), &mut substream(seed, 0)).unwrap();
            assert_ne!(ex.mixture, base.mixture, "seed {seed}");
        }
    }

    #[test]
    fn eval_set_balances_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &["s1"], &["vocals", "bass"], Split::Test);
        std::fs::create_dir_all(dir.path().join("s2")).unwrap();
        write_wav(dir.path().join("s2/bass.wav"), &tone(90.0, 1.0, 8000), WavFormat::Float32).unwrap();
        let mut splits = read_split_file(&dir.path().join(SPLIT_FILE)).unwrap();
        splits.insert("s2".into(), Split::Test);
        write_split_file(&dir.path().join(SPLIT_FILE), &splits).unwrap();

        let m = load_manifest(dir.path(), &dir.path().join(SPLIT_FILE), Split::Test).unwrap();
        let set = make_eval_set(&m, "vocals", 8000, 0.1, ChannelPolicy::Downmix).unwrap();
        assert_eq!(set.len(), 1);
        let song = &set[0];
        assert_eq!(song.song_id, "s1");
        for (_, stem) in &song.stems {
            assert!((rms(stem).unwrap() - 0.1).abs() < 1e-9);
        }
        assert!(rms(&song.mixture).unwrap() <= 0.2 + 1e-12);
        let sum = song.stems[0].1.add(&song.stems[1].1).unwrap();
        assert_eq!(sum, song.mixture);
        let bass_set = make_eval_set(&m, "bass", 8000, 0.1, ChannelPolicy::Downmix).unwrap();
        assert_eq!(bass_set.len(), 2);
    }

    #[test]
    fn split_parsing() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Validation);
        assert!("bogus".parse::<Split>().is_err());
    }
}
