//! Per-frame instrument activation curves: generation from stem energy,
//! binarization, median smoothing, per-second aggregation and scoring.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, FrameConfig};
use crate::error::{Error, Result};

/// Energy-to-confidence map bounds, in dB relative to the loudest frame.
pub const ENERGY_FLOOR_DB: f64 = -60.0;
pub const ENERGY_CEIL_DB: f64 = -10.0;
/// Median pre-smoothing applied to energy-derived confidences.
pub const ENERGY_SMOOTH_FRAMES: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMOOTH_KERNEL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Confidence,
    Binary,
}

impl ActivationKind {
    fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Confidence => "confidence",
            ActivationKind::Binary => "binary",
        }
    }
}

/// Activation of one instrument, one value per spectrogram frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCurve {
    values: Vec<f64>,
    frame_rate: f64,
    instrument: String,
    kind: ActivationKind,
}

impl ActivationCurve {
    pub fn new(
        values: Vec<f64>,
        frame_rate: f64,
        instrument: impl Into<String>,
        kind: ActivationKind,
    ) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame_rate must be positive, got {frame_rate}")));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("activation value {bad} outside [0, 1]")));
        }
        if kind == ActivationKind::Binary {
            if let Some(bad) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Config(format!("binary curve holds {bad}")));
            }
        }
        Ok(Self {
            values,
            frame_rate,
            instrument: instrument.into(),
            kind,
        })
    }

    pub fn binary(values: Vec<f64>, frame_rate: f64, instrument: impl Into<String>) -> Result<Self> {
        Self::new(values, frame_rate, instrument, ActivationKind::Binary)
    }

    pub fn confidence(values: Vec<f64>, frame_rate: f64, instrument: impl Into<String>) -> Result<Self> {
        Self::new(values, frame_rate, instrument, ActivationKind::Confidence)
    }

    pub fn constant(value: f64, len: usize, frame_rate: f64, instrument: impl Into<String>) -> Result<Self> {
        let kind = if value == 0.0 || value == 1.0 {
            ActivationKind::Binary
        } else {
            ActivationKind::Confidence
        };
        Self::new(vec![value; len], frame_rate, instrument, kind)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn instrument(&self) -> &str {
        &self.instrument
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn is_binary(&self) -> bool {
        self.kind == ActivationKind::Binary
    }

    /// Frame-wise OR of two binary curves of equal length.
    pub fn or(&self, other: &ActivationCurve) -> Result<ActivationCurve> {
        if !self.is_binary() || !other.is_binary() {
            return Err(Error::Config("OR is defined on binary curves only".into()));
        }
        check_len(self.len(), other.len())?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(Self { values, ..self.clone() })
    }

    /// Serializes to the `frame_index,value` text format with a `#` header.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# instrument={}", self.instrument);
        let _ = writeln!(s, "# frame_rate={}", self.frame_rate);
        let _ = writeln!(s, "# kind={}", self.kind.as_str());
        s.push_str("frame_index,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::parse("activation CSV", d);
        let mut instrument = None;
        let mut frame_rate = None;
        let mut kind = None;
        let mut values = Vec::new();
        let mut seen_columns = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| bad(format!("line {}: header without '='", lineno + 1)))?;
                match key.trim() {
                    "instrument" => instrument = Some(value.trim().to_string()),
                    "frame_rate" => {
                        frame_rate = Some(value.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?)
                    }
                    "kind" => {
                        kind = Some(match value.trim() {
                            "confidence" => ActivationKind::Confidence,
                            "binary" => ActivationKind::Binary,
                            other => return Err(bad(format!("unknown kind {other:?}"))),
                        })
                    }
                    _ => {}
                }
                continue;
            }
            if !seen_columns {
                if line != "frame_index,value" {
                    return Err(bad(format!("expected column header, got {line:?}")));
                }
                seen_columns = true;
                continue;
            }
            let (idx, value) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("line {}: expected two fields", lineno + 1)))?;
            let idx: usize = idx.trim().parse().map_err(|_| bad(format!("line {}: bad index", lineno + 1)))?;
            if idx != values.len() {
                return Err(bad(format!("frame index {idx} out of sequence")));
            }
            values.push(value.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        Self::new(
            values,
            frame_rate.ok_or_else(|| bad("missing frame_rate".into()))?,
            instrument.ok_or_else(|| bad("missing instrument".into()))?,
            kind.ok_or_else(|| bad("missing kind".into()))?,
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("curve lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// Odd-window median filter with reflected edges.
fn median_filter(x: &[f64], kernel: usize) -> Vec<f64> {
    let n = x.len();
    if kernel <= 1 || n == 0 {
        return x.to_vec();
    }
    let half = (kernel / 2) as isize;
    let reflect = |i: isize| -> f64 {
        if n == 1 {
            return x[0];
        }
        let period = 2 * (n as isize - 1);
        let mut k = i.rem_euclid(period);
        if k >= n as isize {
            k = period - k;
        }
        x[k as usize]
    };
    let mut window = Vec::with_capacity(kernel);
    (0..n as isize)
        .map(|i| {
            window.clear();
            window.extend((i - half..=i + half).map(reflect));
            window.sort_by(f64::total_cmp);
            window[kernel / 2]
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Frame-level activation confidence from a stem's energy envelope.
///
/// Each frame's RMS (over the analysis window centred on the frame) is taken in
/// dB relative to the stem's loudest frame, mapped affinely from
/// [`ENERGY_FLOOR_DB`, `ENERGY_CEIL_DB`] onto [0, 1] with clipping, then median
/// smoothed over [`ENERGY_SMOOTH_FRAMES`] frames.
pub fn energy_activation(
    stem: &AudioClip,
    cfg: &FrameConfig,
    instrument: impl Into<String>,
) -> Result<ActivationCurve> {
    cfg.validate()?;
    if !stem.is_mono() {
        return Err(Error::Config("energy_activation expects a mono stem".into()));
    }
    let x = stem.samples();
    let n = x.len();
    let frames = cfg.num_frames(n).max(1);
    let half = cfg.window_size as isize / 2;
    let frame_rms: Vec<f64> = (0..frames)
        .map(|t| {
            let (start, end) = if cfg.center_pad {
                let c = (t * cfg.hop_size) as isize;
                (c - half, c + half)
            } else {
                let s = (t * cfg.hop_size) as isize;
                (s, s + cfg.window_size as isize)
            };
            let lo = start.max(0) as usize;
            let hi = (end.max(0) as usize).min(n);
            if hi <= lo {
                return 0.0;
            }
            let energy: f64 = x[lo..hi].iter().map(|s| s * s).sum();
            (energy / (hi - lo) as f64).sqrt()
        })
        .collect();
    let peak = frame_rms.iter().cloned().fold(0.0, f64::max);
    let span = ENERGY_CEIL_DB - ENERGY_FLOOR_DB;
    let conf: Vec<f64> = frame_rms
        .iter()
        .map(|&r| {
            if peak == 0.0 || r == 0.0 {
                return 0.0;
            }
            let db = 20.0 * (r / peak).log10();
            ((db - ENERGY_FLOOR_DB) / span).clamp(0.0, 1.0)
        })
        .collect();
    ActivationCurve::confidence(
        median_filter(&conf, ENERGY_SMOOTH_FRAMES),
        cfg.frame_rate(),
        instrument,
    )
}

/// 1 where the value reaches `threshold` (ties count as active), else 0.
pub fn binarize(curve: &ActivationCurve, threshold: f64) -> Result<ActivationCurve> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let values = curve
        .values
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(ActivationCurve {
        values,
        kind: ActivationKind::Binary,
        ..curve.clone()
    })
}

pub fn median_smooth(curve: &ActivationCurve, kernel_frames: usize) -> Result<ActivationCurve> {
    if kernel_frames == 0 || kernel_frames.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "median kernel must be odd and >= 1, got {kernel_frames}"
        )));
    }
    Ok(ActivationCurve {
        values: median_filter(&curve.values, kernel_frames),
        ..curve.clone()
    })
}

/// Median of each whole second of frames; a trailing partial second is kept.
///
/// A frame belongs to every second its time span `[i/r, (i+1)/r)` overlaps, so
/// boundary frames at non-integer frame rates count toward both neighbours.
pub fn aggregate_seconds(curve: &ActivationCurve) -> ActivationCurve {
    let r = curve.frame_rate;
    let n = curve.len();
    let seconds = (n as f64 / r).ceil() as usize;
    let values: Vec<f64> = (0..seconds)
        .map(|s| {
            let mut members: Vec<f64> = (0..n)
                .filter(|&i| {
                    let t0 = i as f64 / r;
                    let t1 = (i + 1) as f64 / r;
                    t0 < (s + 1) as f64 && t1 > s as f64
                })
                .map(|i| curve.values[i])
                .collect();
            median(&mut members)
        })
        .collect();
    let kind = if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        curve.kind
    } else {
        ActivationKind::Confidence
    };
    ActivationCurve {
        values,
        frame_rate: 1.0,
        instrument: curve.instrument.clone(),
        kind,
    }
}

/// Area under the ROC curve via the rank-sum statistic; ties count one half.
pub fn auc(scores: &ActivationCurve, labels: &ActivationCurve) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    if !labels.is_binary() {
        return Err(Error::Config("auc labels must be binary".into()));
    }
    let pos = labels.values.iter().filter(|&&v| v == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedAuc("no positive frames"));
    }
    if neg == 0 {
        return Err(Error::UndefinedAuc("no negative frames"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.values[a].total_cmp(&scores.values[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores.values[order[j + 1]] == scores.values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels.values[k] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Fraction of frames where two binary curves agree.
pub fn frame_accuracy(pred: &ActivationCurve, truth: &ActivationCurve) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("frame_accuracy of empty curves"));
    }
    let hits = pred
        .values
        .iter()
        .zip(&truth.values)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bin(v: &[f64]) -> ActivationCurve {
        ActivationCurve::binary(v.to_vec(), 43.0, "vocals").unwrap()
    }

    fn conf(v: &[f64]) -> ActivationCurve {
        ActivationCurve::confidence(v.to_vec(), 43.0, "vocals").unwrap()
    }

    fn brute_auc(s: &[f64], l: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in l.iter().enumerate() {
            for (j, &lj) in l.iter().enumerate() {
                if li == 1.0 && lj == 0.0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn small_cfg() -> FrameConfig {
        FrameConfig {
            sample_rate: 8000,
            window_size: 256,
            hop_size: 64,
            ..FrameConfig::default()
        }
    }

    #[test]
    fn curve_validation() {
        assert!(ActivationCurve::binary(vec![0.0, 0.5], 10.0, "x").is_err());
        assert!(ActivationCurve::confidence(vec![1.2], 10.0, "x").is_err());
        assert!(ActivationCurve::confidence(vec![0.2], 0.0, "x").is_err());
    }

    #[test]
    fn energy_activation_of_silence_is_zero() {
        let c = energy_activation(&AudioClip::silence(8000, 8000), &small_cfg(), "x").unwrap();
        assert_eq!(c.len(), small_cfg().num_frames(8000));
        assert!(c.values().iter().all(|&v| v == 0.0));
        let b = binarize(&c, 0.5).unwrap();
        assert!(b.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_activation_of_sustained_sine_is_high() {
        let x: Vec<f64> = (0..16_000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / 8000.0).sin())
            .collect();
        let c = energy_activation(&AudioClip::mono(x, 8000).unwrap(), &small_cfg(), "x").unwrap();
        assert!(c.values().iter().all(|&v| v >= 0.99));
    }

    #[test]
    fn energy_activation_tracks_onset() {
        let cfg = small_cfg();
        let n = 16_000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                if i >= n / 2 {
                    (2.0 * PI * 300.0 * i as f64 / 8000.0).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let c = energy_activation(&AudioClip::mono(x.clone(), 8000).unwrap(), &cfg, "x").unwrap();
        // frames whose window lies fully in the loud half, from a direct energy pass
        let half = cfg.window_size / 2;
        let boundary = (n / 2) as f64 / cfg.hop_size as f64;
        for (t, &v) in c.values().iter().enumerate() {
            let center = t * cfg.hop_size;
            let lo = center.saturating_sub(half);
            let hi = (center + half).min(n);
            let energy: f64 = x[lo..hi].iter().map(|s| s * s).sum();
            if (t as f64 - boundary).abs() <= 2.0 + half as f64 / cfg.hop_size as f64 {
                continue;
            }
            if energy == 0.0 {
                assert!(v < 0.5, "frame {t} silent but {v}");
            } else {
                assert!(v >= 0.5, "frame {t} loud but {v}");
            }
        }
    }

    #[test]
    fn binarize_examples() {
        let b = binarize(&conf(&[0.2, 0.5, 0.9]), 0.5).unwrap();
        assert_eq!(b.values(), &[0.0, 1.0, 1.0]);
        assert!(b.is_binary());
        let b = binarize(&conf(&[0.49; 6]), 0.5).unwrap();
        assert!(b.values().iter().all(|&v| v == 0.0));
        assert!(binarize(&conf(&[0.1]), 1.0).is_err());
        assert!(binarize(&conf(&[0.1]), 0.0).is_err());
    }

    #[test]
    fn median_smooth_examples() {
        let c = bin(&[1.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(median_smooth(&c, 1).unwrap(), c);
        assert_eq!(
            median_smooth(&bin(&[1.0, 1.0, 0.0, 1.0, 1.0]), 3).unwrap().values(),
            &[1.0; 5]
        );
        assert_eq!(
            median_smooth(&bin(&[0.0, 0.0, 1.0, 0.0, 0.0]), 3).unwrap().values(),
            &[0.0; 5]
        );
        assert!(matches!(median_smooth(&c, 4), Err(Error::Config(_))));
        assert!(median_smooth(&c, 0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let c = conf(&[0.3; 100]);
        let a = aggregate_seconds(&c);
        assert_eq!(a.len(), 3);
        assert!(a.values().iter().all(|&v| v == 0.3));

        let mut v = vec![1.0; 22];
        v.extend(vec![0.0; 21]);
        assert_eq!(aggregate_seconds(&bin(&v)).values(), &[1.0]);

        let mut v = vec![0.0; 43];
        v.extend(vec![1.0; 43]);
        assert_eq!(aggregate_seconds(&bin(&v)).values(), &[0.0, 1.0]);
    }

    #[test]
    fn auc_examples() {
        let l = bin(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(auc(&conf(&[0.1, 0.2, 0.8, 0.9]), &l).unwrap(), 1.0);
        assert_eq!(auc(&conf(&[0.4; 4]), &l).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        assert_eq!(brute_auc(&s, l.values()), 0.75);
        assert!((auc(&conf(&s), &l).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(
            auc(&conf(&[0.1, 0.2]), &bin(&[1.0, 1.0])),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn frame_accuracy_examples() {
        let a = bin(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(frame_accuracy(&a, &a).unwrap(), 1.0);
        let comp = bin(&a.values().iter().map(|v| 1.0 - v).collect::<Vec<_>>());
        assert_eq!(frame_accuracy(&a, &comp).unwrap(), 0.0);
        let mut one_off = a.values().to_vec();
        one_off[4] = 1.0;
        assert!((frame_accuracy(&a, &bin(&one_off)).unwrap() - 0.9).abs() < 1e-15);
        assert!(frame_accuracy(&bin(&[]), &bin(&[])).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let c = ActivationCurve::confidence(vec![0.0, 0.125, 1.0 / 3.0], 43.06640625, "acoustic guitar").unwrap();
        let text = c.to_csv();
        assert!(text.starts_with("# instrument=acoustic guitar\n"));
        assert_eq!(ActivationCurve::from_csv(&text).unwrap(), c);
        assert!(ActivationCurve::from_csv("frame_index,value\n0,1\n").is_err());
    }

    fn runs_at_least_two() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..2, 2usize..6), 1..20).prop_map(|runs| {
            let mut v = Vec::new();
            let mut last = None;
            for (bit, len) in runs {
                // merge into alternating runs
                let bit = match last {
                    Some(b) if b == bit => 1 - bit,
                    _ => bit,
                };
                v.extend(std::iter::repeat_n(bit as f64, len));
                last = Some(bit);
            }
            v
        })
    }

    proptest! {
        #[test]
        fn median_smooth_idempotent_on_long_runs(v in runs_at_least_two()) {
            let c = bin(&v);
            let once = median_smooth(&c, 3).unwrap();
            let twice = median_smooth(&once, 3).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn smoothing_keeps_binary(v in prop::collection::vec(0.0f64..1.0, 1..80), k in 0usize..5) {
            let b = binarize(&median_smooth(&conf(&v), 2 * k + 1).unwrap(), 0.5).unwrap();
            prop_assert!(b.values().iter().all(|&x| x == 0.0 || x == 1.0));
            let s = median_smooth(&binarize(&conf(&v), 0.5).unwrap(), 2 * k + 1).unwrap();
            prop_assert!(s.is_binary());
            prop_assert!(s.values().iter().all(|&x| x == 0.0 || x == 1.0));
        }

        #[test]
        fn auc_matches_pairs_and_is_rank_invariant(
            pairs in prop::collection::vec((0u8..20, 0u8..2), 2..120)
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 20.0).collect();
            let l: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assume!(l.contains(&0.0) && l.contains(&1.0));
            let a = auc(&conf(&s), &bin(&l)).unwrap();
            prop_assert!((a - brute_auc(&s, &l)).abs() < 1e-12);
            let warped: Vec<f64> = s.iter().map(|x| x.powi(3) * 0.5 + 0.1).collect();
            let b = auc(&conf(&warped), &bin(&l)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn aggregate_length(n in 0usize..400, rate in 1.0f64..60.0) {
            let c = ActivationCurve::confidence(vec![0.5; n], rate, "x").unwrap();
            prop_assert_eq!(aggregate_seconds(&c).len(), (n as f64 / rate).ceil() as usize);
        }
    }
}
