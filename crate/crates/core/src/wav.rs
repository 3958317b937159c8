//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const WAV_SAMPLE_RATE: u32 = 16_000;

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav(format!("{}: {e}", path.display()))
}

/// Reads a mono 16-bit 16 kHz WAV file, mapping samples to `[-1, 1)` by
/// division by 32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!(
                "expected 16-bit PCM, found {} bits {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.sample_rate != WAV_SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!("expected 16000 Hz, found {} Hz", spec.sample_rate),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes to 16 bits and writes a mono WAV file. Samples outside
/// `[-1, 1)` are clamped; the number of clamped samples is returned.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<usize> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    let mut clipped = 0;
    for &s in wave.samples() {
        let (q, clip) = quantize(s);
        clipped += clip as usize;
        writer.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))?;
    Ok(clipped)
}

fn quantize(s: f64) -> (i16, bool) {
    let v = (s * 32768.0).round();
    if v >= 32767.0 {
        (i16::MAX, v > 32767.0)
    } else if v < -32768.0 {
        (i16::MIN, true)
    } else {
        (v as i16, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_clipping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.5, -2.0, 1.0 / 32768.0], 16000).unwrap();
        let clipped = write_wav(&path, &w).unwrap();
        assert_eq!(clipped, 2);
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), 6);
        assert_eq!(r.samples()[1], 0.5);
        assert_eq!(r.samples()[3], 32767.0 / 32768.0);
        assert_eq!(r.samples()[4], -1.0);
        assert_eq!(r.samples()[5], 1.0 / 32768.0);
    }

    #[test]
    fn rejects_stereo_and_float() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("mono"), "{err}");

        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.0f32).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&path).unwrap_err().to_string().contains("16-bit"));
    }
}
