use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Analysis parameters shared by [`stft`] and [`istft`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn new(frame_len: usize, hop: usize, fft_size: usize) -> Result<Self> {
        let cfg = Self {
            frame_len,
            hop,
            fft_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.frame_len == 0 || self.fft_size == 0 {
            return Err(Error::invalid("stft sizes must be positive"));
        }
        if !(self.hop <= self.frame_len && self.frame_len <= self.fft_size) {
            return Err(Error::invalid(format!(
                "need hop <= frame_len <= fft_size, got {}/{}/{}",
                self.hop, self.frame_len, self.fft_size
            )));
        }
        Ok(())
    }

    /// One-sided bin count, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Periodic Hann window: `w[k] = 0.5 (1 - cos(2 pi k / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("window length must be >= 1"));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

/// Number of full frames without padding: `1 + (len - frame_len) / hop`.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> Result<usize> {
    if hop == 0 || frame_len == 0 {
        return Err(Error::invalid("frame_len and hop must be positive"));
    }
    if len < frame_len {
        return Err(Error::TooShort { len, need: frame_len });
    }
    Ok(1 + (len - frame_len) / hop)
}

/// Borrowed views of every full frame; frame `t` starts at `t * hop`.
pub fn frame_signal(wave: &Waveform, frame_len: usize, hop: usize) -> Result<Vec<&[f64]>> {
    let n = frame_count(wave.len(), frame_len, hop)?;
    let s = wave.samples();
    Ok((0..n).map(|t| &s[t * hop..t * hop + frame_len]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(frames: usize, data: Vec<Complex64>, config: StftConfig) -> Result<Self> {
        config.validate()?;
        let bins = config.bins();
        if frames == 0 || data.len() != frames * bins {
            return Err(Error::shape(format!(
                "spectrogram data of {} values does not fit {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            data,
            config,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Non-negative `frames x bins` magnitude matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl MagnitudeSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "magnitude data of {} values does not fit {frames}x{bins}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("magnitude entry {v} is not finite and >= 0")));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.bins + f]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Angles in `(-pi, pi]`, same layout as [`MagnitudeSpectrogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    frames: usize,
    bins: usize,
    data: Vec<f64>,
}

impl Phase {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "phase data of {} values does not fit {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Hann-windowed, zero-padded short-time Fourier transform. Frames start at
/// sample 0 with no centre padding.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let frames = frame_signal(wave, cfg.frame_len, cfg.hop)?;
    let window = hann_window(cfg.frame_len)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.bins();

    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames.len() * bins);
    for frame in &frames {
        for (b, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex64::new(x * w, 0.0);
        }
        for b in &mut buf[cfg.frame_len..] {
            *b = Complex64::new(0.0, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::new(frames.len(), data, *cfg)
}

/// Weighted overlap-add inverse of [`stft`].
///
/// The synthesis window equals the analysis window and each output sample is
/// divided by the accumulated squared window. Samples whose window energy is
/// below `1e-8` are set to zero. The result is truncated or zero-padded to
/// `out_len`.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig, out_len: usize, sample_rate: u32) -> Result<Waveform> {
    cfg.validate()?;
    if spec.config() != *cfg || spec.bins() != cfg.bins() {
        return Err(Error::shape(format!(
            "spectrogram built with {:?} cannot be inverted with {:?}",
            spec.config(),
            cfg
        )));
    }
    let n = cfg.fft_size;
    let window = hann_window(cfg.frame_len)?;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = (spec.frames() - 1) * cfg.hop + cfg.frame_len;

    let mut acc = vec![0.0f64; total];
    let mut wsum = vec![0.0f64; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let bins = cfg.bins();
    for t in 0..spec.frames() {
        let frame = spec.frame(t);
        buf[..bins].copy_from_slice(frame);
        // Hermitian completion so the inverse is real.
        for k in bins..n {
            buf[k] = frame[n - k].conj();
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            acc[start + i] += buf[i].re / n as f64 * w;
            wsum[start + i] += w * w;
        }
    }

    let mut out = vec![0.0f64; out_len];
    for (o, (a, w)) in out.iter_mut().zip(acc.iter().zip(&wsum)) {
        if *w >= 1e-8 {
            *o = a / w;
        }
    }
    Waveform::new(out, sample_rate)
}

/// Splits a complex spectrogram into magnitude and phase. The phase of an
/// exact zero is 0.
pub fn magnitude_phase(spec: &ComplexSpectrogram) -> (MagnitudeSpectrogram, Phase) {
    let mag = spec.data().iter().map(|c| c.norm()).collect();
    let phase = spec
        .data()
        .iter()
        .map(|c| if c.re == 0.0 && c.im == 0.0 { 0.0 } else { c.arg() })
        .collect();
    (
        MagnitudeSpectrogram {
            frames: spec.frames(),
            bins: spec.bins(),
            data: mag,
        },
        Phase {
            frames: spec.frames(),
            bins: spec.bins(),
            data: phase,
        },
    )
}

/// `mag * exp(i * phase)`, element-wise.
pub fn reconstruct(mag: &MagnitudeSpectrogram, phase: &Phase, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    if mag.frames() != phase.frames() || mag.bins() != phase.bins() {
        return Err(Error::shape(format!(
            "magnitude {}x{} vs phase {}x{}",
            mag.frames(),
            mag.bins(),
            phase.frames(),
            phase.bins()
        )));
    }
    let data = mag
        .data()
        .iter()
        .zip(phase.data())
        .map(|(m, p)| Complex64::from_polar(*m, *p))
        .collect();
    ComplexSpectrogram::new(mag.frames(), data, *cfg)
}
