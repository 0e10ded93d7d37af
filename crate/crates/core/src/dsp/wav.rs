use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, AudioClip};
use crate::error::{Error, Result};

/// Sample encodings supported on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Int16,
    Int24,
    #[default]
    Float32,
}

/// Decodes a PCM WAV file (16/24/32-bit integer or 32-bit float) and resamples
/// it to `target_rate` when the file uses a different rate.
pub fn read_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if !(1..=2).contains(&n_ch) {
        return Err(Error::parse(
            path.display().to_string(),
            format!("{n_ch} channels; only mono and stereo are supported"),
        ));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(s);
        }
    }
    let clip = AudioClip::new(channels, spec.sample_rate)?;
    if spec.sample_rate == target_rate {
        Ok(clip)
    } else {
        Ok(resample(&clip, target_rate))
    }
}

/// Writes `clip` at its own sample rate. Integer formats clip to full scale.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let (bits, sample_format) = match format {
        WavFormat::Int16 => (16, SampleFormat::Int),
        WavFormat::Int24 => (24, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..clip.len() {
        for c in clip.channels() {
            match format {
                WavFormat::Float32 => writer.write_sample(c[i] as f32),
                WavFormat::Int16 | WavFormat::Int24 => {
                    let full = ((1i64 << (bits - 1)) - 1) as f64;
                    let v = (c[i].clamp(-1.0, 1.0) * full).round() as i32;
                    writer.write_sample(v)
                }
            }
            .map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 / n as f64) * 1.6 - 0.8).collect()
    }

    #[test]
    fn float_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![ramp(500), ramp(500)], 8000).unwrap();
        write_wav(&p, &clip, WavFormat::Float32).unwrap();
        let back = read_wav(&p, 8000).unwrap();
        assert_eq!(back.num_channels(), 2);
        for (a, b) in back.channel(1).iter().zip(clip.channel(1)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn integer_formats_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let clip = AudioClip::mono(ramp(300), 8000).unwrap();
        for (fmt, tol) in [(WavFormat::Int16, 1e-4), (WavFormat::Int24, 1e-6)] {
            let p = dir.path().join(format!("{fmt:?}.wav"));
            write_wav(&p, &clip, fmt).unwrap();
            let back = read_wav(&p, 8000).unwrap();
            for (a, b) in back.samples().iter().zip(clip.samples()) {
                assert!((a - b).abs() < tol, "{fmt:?}");
            }
        }
    }

    #[test]
    fn resamples_on_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_wav(&p, &AudioClip::silence(22_050, 22_050), WavFormat::Float32).unwrap();
        let back = read_wav(&p, 44_100).unwrap();
        assert_eq!(back.sample_rate(), 44_100);
        assert_eq!(back.len(), 44_100);
    }

    #[test]
    fn missing_file_is_wav_error() {
        assert!(matches!(
            read_wav("/nonexistent/x.wav", 44_100),
            Err(Error::Wav { .. })
        ));
    }
}
