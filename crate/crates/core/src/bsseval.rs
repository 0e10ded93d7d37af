//! BSS-eval style separation metrics, the ideal binary mask and input-SDR.
//!
//! An estimate is split into a target part, an interference part and an
//! artifact part by least-squares projection onto time-shifted references.
//! Shifted signals are kept at their full length (`n + taps - 1`), so the
//! Gram matrices are Toeplitz blocks built from cross-correlations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::{istft_with_phase, stft, AudioClip, FrameConfig, MagSpectrogram};
use crate::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub frame_seconds: f64,
    pub distortion_filter_taps: usize,
    pub db_clip: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_seconds: 1.0,
            distortion_filter_taps: 512,
            db_clip: 30.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distortion_filter_taps == 0 {
            return Err(Error::Config("distortion_filter_taps must be at least 1".into()));
        }
        if !(self.frame_seconds > 0.0 && self.frame_seconds.is_finite()) {
            return Err(Error::Config("frame_seconds must be positive".into()));
        }
        if !(self.db_clip > 0.0 && self.db_clip.is_finite()) {
            return Err(Error::Config("db_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `s_target + e_interf + e_artif` equals the estimate zero-padded to
/// `n + taps - 1` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Sdr,
    Sir,
    Sar,
    Isr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Sdr, Metric::Sir, Metric::Sar, Metric::Isr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sdr => "SDR",
            Metric::Sir => "SIR",
            Metric::Sar => "SAR",
            Metric::Isr => "ISR",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub isr: f64,
}

impl FrameMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Sdr => self.sdr,
            Metric::Sir => self.sir,
            Metric::Sar => self.sar,
            Metric::Isr => self.isr,
        }
    }
}

/// `10·log10(num/den)` limited to `±clip`.
pub fn db_ratio(num: f64, den: f64, clip: f64) -> f64 {
    let v = if num <= 0.0 {
        -clip
    } else if den <= 0.0 {
        clip
    } else {
        10.0 * (num / den).log10()
    };
    if v.is_nan() {
        -clip
    } else {
        v.clamp(-clip, clip)
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

struct Correlator {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Correlator {
    fn new(len: usize, taps: usize) -> Self {
        let n = (len + taps).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.n, Complex64::new(0.0, 0.0));
        self.fwd.process(&mut buf);
        buf
    }

    /// `c(l) = Σ_k x[k]·y[k+l]`, returned for `l = -(max_lag)..=max_lag` at
    /// index `l + max_lag`.
    fn xcorr(&self, x: &[Complex64], y: &[Complex64], max_lag: usize) -> Vec<f64> {
        let mut buf: Vec<Complex64> = x.iter().zip(y).map(|(a, b)| a.conj() * b).collect();
        self.inv.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        (0..=2 * max_lag)
            .map(|i| {
                let lag = i as isize - max_lag as isize;
                buf[lag.rem_euclid(self.n as isize) as usize].re * scale
            })
            .collect()
    }
}

/// Cholesky solve of a symmetric positive-definite system, in place.
fn cholesky_solve(a: &[f64], b: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    let scale = (0..dim).map(|i| a[i * dim + i].abs()).fold(0.0, f64::max);
    for j in 0..dim {
        let mut d = l[j * dim + j];
        for k in 0..j {
            d -= l[j * dim + k] * l[j * dim + k];
        }
        if !(d > scale * 1e-13) {
            return None;
        }
        let d = d.sqrt();
        l[j * dim + j] = d;
        for i in j + 1..dim {
            let mut s = l[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..dim {
        for k in 0..i {
            y[i] -= l[i * dim + k] * y[k];
        }
        y[i] /= l[i * dim + i];
    }
    for i in (0..dim).rev() {
        for k in i + 1..dim {
            y[i] -= l[k * dim + i] * y[k];
        }
        y[i] /= l[i * dim + i];
    }
    Some(y)
}

fn solve_gram(gram: &[f64], rhs: &[f64], dim: usize) -> Result<Vec<f64>> {
    if let Some(x) = cholesky_solve(gram, rhs, dim) {
        return Ok(x);
    }
    let trace: f64 = (0..dim).map(|i| gram[i * dim + i]).sum();
    let lambda = 1e-10 * trace;
    log::warn!("singular Gram system ({dim}x{dim}); retrying with ridge {lambda:e}");
    let mut ridged = gram.to_vec();
    for i in 0..dim {
        ridged[i * dim + i] += lambda;
    }
    cholesky_solve(&ridged, rhs, dim)
        .ok_or_else(|| Error::Numerical(format!("Gram system ({dim}x{dim}) is singular even with ridge")))
}

/// `Σ_j Σ_b coef[j·taps + b] · refs[j][t - b]` over the padded length.
fn synthesize(refs: &[&[f64]], coef: &[f64], taps: usize, out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (j, r) in refs.iter().enumerate() {
        for b in 0..taps {
            let c = coef[j * taps + b];
            if c == 0.0 {
                continue;
            }
            for (k, &v) in r.iter().enumerate() {
                out[k + b] += c * v;
            }
        }
    }
    out
}

/// Splits `est` into target, interference and artifact parts.
///
/// `refs[0]` is the target; the others are interferers. Each reference may
/// be delayed by `0..taps` samples.
pub fn decompose(est: &[f64], refs: &[&[f64]], taps: usize) -> Result<Decomposition> {
    if refs.is_empty() {
        return Err(Error::Empty("references"));
    }
    if taps == 0 {
        return Err(Error::Config("taps must be at least 1".into()));
    }
    let n = est.len();
    if let Some(r) = refs.iter().find(|r| r.len() != n) {
        return Err(Error::Shape(format!("reference has {} samples, estimate {n}", r.len())));
    }
    if n == 0 {
        return Err(Error::Empty("estimate"));
    }
    let nr = refs.len();
    let corr = Correlator::new(n, taps);
    let spectra: Vec<Vec<Complex64>> = refs.iter().map(|r| corr.spectrum(r)).collect();
    let est_spec = corr.spectrum(est);
    let lag0 = taps - 1;

    let dim = nr * taps;
    let mut gram = vec![0.0; dim * dim];
    for i in 0..nr {
        for j in i..nr {
            let c = corr.xcorr(&spectra[i], &spectra[j], lag0);
            for a in 0..taps {
                for b in 0..taps {
                    // <r_i delayed a, r_j delayed b> = c_ij(a - b)
                    let v = c[a + lag0 - b];
                    gram[(i * taps + a) * dim + j * taps + b] = v;
                    gram[(j * taps + b) * dim + i * taps + a] = v;
                }
            }
        }
    }
    let mut rhs = vec![0.0; dim];
    for j in 0..nr {
        let c = corr.xcorr(&spectra[j], &est_spec, lag0);
        rhs[j * taps..(j + 1) * taps].copy_from_slice(&c[lag0..]);
    }

    let out_len = n + taps - 1;
    let target_gram: Vec<f64> = (0..taps)
        .flat_map(|a| gram[a * dim..a * dim + taps].to_vec())
        .collect();
    let target_coef = solve_gram(&target_gram, &rhs[..taps], taps)?;
    let s_target = synthesize(&refs[..1], &target_coef, taps, out_len);
    let all_coef = solve_gram(&gram, &rhs, dim)?;
    let p_all = synthesize(refs, &all_coef, taps, out_len);

    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = (0..out_len)
        .map(|t| {
            let e = if t < n { est[t] } else { 0.0 };
            e - s_target[t] - e_interf[t]
        })
        .collect();
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

/// Energies entering the four ratios; summed over channels.
#[derive(Debug, Clone, Copy, Default)]
struct Energies {
    target: f64,
    distortion: f64,
    interf: f64,
    target_interf: f64,
    artif: f64,
    reference: f64,
    spatial: f64,
}

impl Energies {
    fn add_channel(&mut self, d: &Decomposition, reference: &[f64]) {
        let dist: Vec<f64> = d.e_interf.iter().zip(&d.e_artif).map(|(a, b)| a + b).collect();
        let ti: Vec<f64> = d.s_target.iter().zip(&d.e_interf).map(|(a, b)| a + b).collect();
        let spatial: Vec<f64> = d
            .s_target
            .iter()
            .enumerate()
            .map(|(t, s)| s - reference.get(t).copied().unwrap_or(0.0))
            .collect();
        self.target += energy(&d.s_target);
        self.distortion += energy(&dist);
        self.interf += energy(&d.e_interf);
        self.target_interf += energy(&ti);
        self.artif += energy(&d.e_artif);
        self.reference += energy(reference);
        self.spatial += energy(&spatial);
    }

    fn metrics(&self, clip: f64) -> FrameMetrics {
        FrameMetrics {
            sdr: db_ratio(self.target, self.distortion, clip),
            sir: db_ratio(self.target, self.interf, clip),
            sar: db_ratio(self.target_interf, self.artif, clip),
            isr: db_ratio(self.reference, self.spatial, clip),
        }
    }
}

/// Sample ranges of the evaluation frames.
///
/// Frames are non-overlapping windows of `frame_seconds`; a trailing partial
/// window is dropped. A signal shorter than one window is a single frame.
pub fn frame_ranges(len: usize, sample_rate: u32, cfg: &EvalConfig) -> Vec<(usize, usize)> {
    let win = ((cfg.frame_seconds * sample_rate as f64).round() as usize).max(1);
    if len == 0 {
        return Vec::new();
    }
    if len < win {
        return vec![(0, len)];
    }
    (0..len / win).map(|i| (i * win, (i + 1) * win)).collect()
}

/// Framewise metrics of `est` against `refs` (target first).
///
/// A frame where the target reference is silent is `None`. Interferers that
/// are silent inside a frame are left out of that frame's projection.
pub fn metrics_frame(est: &AudioClip, refs: &[AudioClip], cfg: &EvalConfig) -> Result<Vec<Option<FrameMetrics>>> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::Empty("references"));
    }
    for r in refs {
        if r.len() != est.len() || r.num_channels() != est.num_channels() {
            return Err(Error::Shape(format!(
                "reference is {}x{}, estimate {}x{}",
                r.num_channels(),
                r.len(),
                est.num_channels(),
                est.len()
            )));
        }
        if r.sample_rate() != est.sample_rate() {
            return Err(Error::Config("reference and estimate sample rates differ".into()));
        }
    }
    if est.is_empty() {
        return Err(Error::Empty("estimate"));
    }
    let ranges = frame_ranges(est.len(), est.sample_rate(), cfg);
    ranges
        .par_iter()
        .map(|&(s, e)| {
            if refs[0].channels().iter().all(|c| c[s..e].iter().all(|&v| v == 0.0)) {
                return Ok(None);
            }
            let mut acc = Energies::default();
            for ch in 0..est.num_channels() {
                let target = &refs[0].channel(ch)[s..e];
                let mut frame_refs: Vec<&[f64]> = vec![target];
                frame_refs.extend(
                    refs[1..]
                        .iter()
                        .map(|r| &r.channel(ch)[s..e])
                        .filter(|r| r.iter().any(|&v| v != 0.0)),
                );
                let d = if target.iter().all(|&v| v == 0.0) {
                    // silent in this channel only: everything is distortion
                    let est_ch = &est.channel(ch)[s..e];
                    let mut artif = est_ch.to_vec();
                    artif.resize(e - s + cfg.distortion_filter_taps - 1, 0.0);
                    let z = vec![0.0; artif.len()];
                    Decomposition {
                        s_target: z.clone(),
                        e_interf: z,
                        e_artif: artif,
                    }
                } else {
                    decompose(&est.channel(ch)[s..e], &frame_refs, cfg.distortion_filter_taps)?
                };
                acc.add_channel(&d, target);
            }
            Ok(Some(acc.metrics(cfg.db_clip)))
        })
        .collect()
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Median over valid frames of one metric.
pub fn frame_median(frames: &[Option<FrameMetrics>], metric: Metric) -> Option<f64> {
    let vals: Vec<f64> = frames.iter().flatten().map(|f| f.get(metric)).collect();
    median(&vals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub song: String,
    pub instrument: String,
    /// Per metric, one entry per frame; `null` marks an invalid frame.
    pub frames: BTreeMap<Metric, Vec<Option<f64>>>,
    pub medians: BTreeMap<Metric, Option<f64>>,
}

impl TrackReport {
    pub fn new(song: impl Into<String>, instrument: impl Into<String>, frames: &[Option<FrameMetrics>]) -> Self {
        let mut series = BTreeMap::new();
        let mut medians = BTreeMap::new();
        for m in Metric::ALL {
            series.insert(m, frames.iter().map(|f| f.map(|f| f.get(m))).collect());
            medians.insert(m, frame_median(frames, m));
        }
        Self {
            song: song.into(),
            instrument: instrument.into(),
            frames: series,
            medians,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub aggregation: String,
    pub tracks: Vec<TrackReport>,
    /// instrument → metric → median over tracks (`null` when missing).
    pub summary: BTreeMap<String, BTreeMap<Metric, Option<f64>>>,
}

/// Median over tracks of each track's frame median, per instrument.
pub fn aggregate(tracks: &[TrackReport]) -> BTreeMap<String, BTreeMap<Metric, Option<f64>>> {
    let mut out: BTreeMap<String, BTreeMap<Metric, Option<f64>>> = BTreeMap::new();
    let instruments: std::collections::BTreeSet<&str> = tracks.iter().map(|t| t.instrument.as_str()).collect();
    for inst in instruments {
        let entry = out.entry(inst.to_string()).or_default();
        for m in Metric::ALL {
            let vals: Vec<f64> = tracks
                .iter()
                .filter(|t| t.instrument == inst)
                .filter_map(|t| t.medians.get(&m).copied().flatten())
                .collect();
            entry.insert(m, median(&vals));
        }
    }
    out
}

impl EvalReport {
    pub fn new(config: EvalConfig, tracks: Vec<TrackReport>) -> Self {
        let summary = aggregate(&tracks);
        Self {
            config,
            aggregation: "median over valid frames, then median over tracks".into(),
            tracks,
            summary,
        }
    }

    pub fn get(&self, instrument: &str, metric: Metric) -> Option<f64> {
        self.summary.get(instrument)?.get(&metric).copied().flatten()
    }

    /// `instrument,metric,median_db`; a missing value is an empty field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instrument,metric,median_db\n");
        for (inst, metrics) in &self.summary {
            for (m, v) in metrics {
                match v {
                    Some(v) => s.push_str(&format!("{inst},{m},{v}\n")),
                    None => s.push_str(&format!("{inst},{m},\n")),
                }
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Binary masks per stem: each bin goes to the loudest stem, ties to the
/// lowest index.
pub fn ibm_masks(stems: &[MagSpectrogram]) -> Result<Vec<Vec<f64>>> {
    let first = stems.first().ok_or(Error::Empty("stems"))?;
    if stems.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape("stem spectrograms differ in shape".into()));
    }
    let size = first.values().len();
    let mut masks = vec![vec![0.0; size]; stems.len()];
    for i in 0..size {
        let mut best = 0;
        for (k, s) in stems.iter().enumerate().skip(1) {
            if s.values()[i] > stems[best].values()[i] {
                best = k;
            }
        }
        masks[best][i] = 1.0;
    }
    Ok(masks)
}

/// Ideal-binary-mask estimates of every stem, using the mixture's magnitude
/// and phase.
pub fn ideal_binary_mask(mixture: &AudioClip, stems: &[AudioClip], frame: &FrameConfig) -> Result<Vec<AudioClip>> {
    if stems.is_empty() {
        return Err(Error::Empty("stems"));
    }
    for s in stems {
        if s.len() != mixture.len() || s.num_channels() != mixture.num_channels() {
            return Err(Error::Shape("stems must align with the mixture".into()));
        }
    }
    let n = mixture.len();
    let mut per_stem: Vec<Vec<Vec<f64>>> = vec![Vec::new(); stems.len()];
    for ch in 0..mixture.num_channels() {
        let mono = |c: &AudioClip| AudioClip::mono(c.channel(ch).to_vec(), c.sample_rate());
        let (mix_mag, mix_phase) = stft(&mono(mixture)?, frame)?;
        let mags = stems
            .iter()
            .map(|s| Ok(stft(&mono(s)?, frame)?.0))
            .collect::<Result<Vec<_>>>()?;
        let masks = ibm_masks(&mags)?;
        for (k, m) in masks.iter().enumerate() {
            let (bins, frames) = mix_mag.shape();
            let masked = MagSpectrogram::new(
                mix_mag.values().iter().zip(m).map(|(v, w)| v * w).collect(),
                bins,
                frames,
                *frame,
            )?;
            let clip = istft_with_phase(&masked, &mix_phase, Some(n))?;
            per_stem[k].push(clip.into_channels().remove(0));
        }
    }
    per_stem
        .into_iter()
        .map(|chans| AudioClip::new(chans, frame.sample_rate))
        .collect()
}

/// Aggregated SDR of the unprocessed mixture as the target estimate.
pub fn input_sdr(mixture: &AudioClip, target: &AudioClip, others: &[AudioClip], cfg: &EvalConfig) -> Result<Option<f64>> {
    let mut refs = vec![target.clone()];
    refs.extend(others.iter().cloned());
    let frames = metrics_frame(mixture, &refs, cfg)?;
    Ok(frame_median(&frames, Metric::Sdr))
}

#[cfg(test)]
mod tests;
