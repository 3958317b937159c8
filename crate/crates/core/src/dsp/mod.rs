//! Deterministic signal processing: framing, STFT/ISTFT, log-Mel filterbanks,
//! energy VAD, loudness normalization and SNR-controlled mixing.
//!
//! Everything here works in `f64` and is a pure function of its inputs.

mod fbank;
mod level;
mod stft;

pub use fbank::{energy_vad, log_mel_fbank, mel_filter_centers, Fbank, FbankConfig, LOG_FLOOR};
pub use level::{mix_at_snr, power, rms, rms_normalize, snr_db};
pub use stft::{
    frame_count, frame_signal, hann_window, istft, magnitude_phase, reconstruct, stft, ComplexSpectrogram,
    MagnitudeSpectrogram, Phase, StftConfig,
};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal with nominal amplitude range `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of `len` samples starting at `offset`.
    pub fn slice(&self, offset: usize, len: usize) -> Result<Waveform> {
        if offset + len > self.samples.len() {
            return Err(Error::TooShort {
                len: self.samples.len(),
                need: offset + len,
            });
        }
        Ok(Waveform {
            samples: self.samples[offset..offset + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; both signals must share length and rate.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::shape(format!(
                "cannot add waveforms of {} @ {} Hz and {} @ {} Hz",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        Ok(Waveform {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate: self.sample_rate,
        })
    }
}
