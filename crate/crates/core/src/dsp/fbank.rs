use super::stft::{stft, StftConfig};
use super::Waveform;
use crate::error::{Error, Result};

/// Floor applied before the logarithm so silent bands stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-Mel filterbank parameters. Defaults are 64 bands over 25 ms frames
/// with a 10 ms shift at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            frame_len: 400,
            hop: 160,
            fft_size: 512,
            sample_rate: 16_000,
        }
    }
}

impl FbankConfig {
    fn stft(&self) -> Result<StftConfig> {
        let cfg = StftConfig::new(self.frame_len, self.hop, self.fft_size)?;
        if self.n_mels == 0 || self.n_mels >= cfg.bins() {
            return Err(Error::invalid(format!(
                "n_mels must be in 1..{}, got {}",
                cfg.bins(),
                self.n_mels
            )));
        }
        Ok(cfg)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges in Hz: `n_mels + 2` points equally spaced on the HTK Mel scale
/// from 0 Hz to Nyquist.
fn mel_points(cfg: &FbankConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let n = cfg.n_mels + 1;
    (0..=n).map(|i| mel_to_hz(top * i as f64 / n as f64)).collect()
}

/// Centre frequency in Hz of each triangular filter.
pub fn mel_filter_centers(cfg: &FbankConfig) -> Vec<f64> {
    let pts = mel_points(cfg);
    pts[1..=cfg.n_mels].to_vec()
}

/// `n_mels x bins` triangular weights with unit peak.
fn mel_filters(cfg: &FbankConfig, bins: usize) -> Vec<Vec<f64>> {
    let pts = mel_points(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// `frames x n_mels` log-Mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Fbank {
    frames: usize,
    n_mels: usize,
    data: Vec<f64>,
}

impl Fbank {
    pub fn new(frames: usize, n_mels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * n_mels {
            return Err(Error::shape(format!(
                "fbank data of {} values does not fit {frames}x{n_mels}",
                data.len()
            )));
        }
        Ok(Self { frames, n_mels, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// New matrix holding only the listed frames, in the given order.
    pub fn select(&self, frames: &[usize]) -> Fbank {
        let mut data = Vec::with_capacity(frames.len() * self.n_mels);
        for &t in frames {
            data.extend_from_slice(self.frame(t));
        }
        Fbank {
            frames: frames.len(),
            n_mels: self.n_mels,
            data,
        }
    }

    /// Subtracts the per-band mean over all frames.
    pub fn mean_normalized(&self) -> Fbank {
        let mut mean = vec![0.0; self.n_mels];
        for t in 0..self.frames {
            for (m, v) in mean.iter_mut().zip(self.frame(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.frames.max(1) as f64);
        let data = self
            .data
            .chunks(self.n_mels)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        Fbank {
            frames: self.frames,
            n_mels: self.n_mels,
            data,
        }
    }
}

/// Log-Mel filterbank: Hann-windowed power spectrum, HTK triangular Mel
/// filters spanning 0 Hz to Nyquist, then `ln(max(p, 1e-10))`.
pub fn log_mel_fbank(wave: &Waveform, cfg: &FbankConfig) -> Result<Fbank> {
    let stft_cfg = cfg.stft()?;
    if wave.sample_rate() != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "fbank configured for {} Hz, got {} Hz audio",
            cfg.sample_rate,
            wave.sample_rate()
        )));
    }
    let spec = stft(wave, &stft_cfg)?;
    let filters = mel_filters(cfg, spec.bins());
    let mut data = Vec::with_capacity(spec.frames() * cfg.n_mels);
    let mut power = vec![0.0; spec.bins()];
    for t in 0..spec.frames() {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        for filt in &filters {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Fbank::new(spec.frames(), cfg.n_mels, data)
}

/// Energy-based voice activity detection on log-Mel frames.
///
/// Frame energy is the log of the summed Mel power (log-sum-exp of the
/// coefficients). Frames within `threshold_db` of the loudest frame are kept;
/// the loudest frame is always kept. Returns ascending frame indices.
pub fn energy_vad(fbank: &Fbank, threshold_db: f64) -> Vec<usize> {
    if fbank.frames() == 0 {
        return Vec::new();
    }
    let energy: Vec<f64> = (0..fbank.frames())
        .map(|t| {
            let row = fbank.frame(t);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
        })
        .collect();
    let (loudest, max_e) =
        energy.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &e)| if e > best.1 { (i, e) } else { best },
        );
    let floor = max_e - threshold_db * std::f64::consts::LN_10 / 10.0;
    energy
        .iter()
        .enumerate()
        .filter(|&(i, &e)| i == loudest || e > floor)
        .map(|(i, _)| i)
        .collect()
}
