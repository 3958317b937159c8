//! Mixture simulation, separator training, inference and SDR evaluation.

mod dataset;
mod eval;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, NoiseSet};
use crate::dsp::{istft, mix_at_snr, rms, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

pub use dataset::{read_samples, write_samples, SampleRecord, INDEX_FILE};
pub use eval::{
    ablate, evaluate, run_ablation, sdr, separate, separate_with_mask, AblationOutcome, EvalReport, EvalRow,
    MaskOverride, SDR_CAP_DB,
};
pub use train::{
    prepare_example, train_separator, EarlyStopping, EpochRecord, Example, SeparatorContext, TrainConfig, TrainHooks,
    TrainOutcome,
};

/// Both sources are brought to this RMS before mixing.
pub const MIX_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    TwoSpeaker,
    Noisy,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_speaker" => Ok(Self::TwoSpeaker),
            "noisy" => Ok(Self::Noisy),
            _ => Err(Error::invalid(format!(
                "mix mode must be two_speaker or noisy, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoSpeaker => "two_speaker",
            Self::Noisy => "noisy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSpec {
    pub mode: MixMode,
    pub crop_seconds: f64,
    pub snr_min: f64,
    pub snr_max: f64,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            mode: MixMode::TwoSpeaker,
            crop_seconds: 3.0,
            snr_min: 5.0,
            snr_max: 20.0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_seconds > 0.0 && self.crop_seconds.is_finite()) {
            return Err(Error::invalid(format!(
                "crop length must be positive, got {}",
                self.crop_seconds
            )));
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            return Err(Error::invalid(format!(
                "SNR range [{}, {}] is not a finite interval",
                self.snr_min, self.snr_max
            )));
        }
        Ok(())
    }

    pub fn crop_len(&self, sample_rate: u32) -> usize {
        (self.crop_seconds * sample_rate as f64).round() as usize
    }
}

/// One training or evaluation example. `mixture = target + interference`
/// element-wise in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    pub target: Waveform,
    /// A different utterance of the target speaker, uncropped.
    pub reference: Waveform,
    /// The interfering speaker, or the scaled noise in noisy mode.
    pub interference: Waveform,
    pub target_speaker: String,
    pub interferer: Option<String>,
    pub snr_db: Option<f64>,
    pub seed: u64,
    /// `(speaker index, utterance index)` of the reference in its corpus.
    pub reference_key: (usize, usize),
    /// `(speaker index, utterance index)` the target was cropped from.
    pub target_key: (usize, usize),
    /// Crop start of the target within its utterance.
    pub target_offset: usize,
}

fn crop(wave: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Result<(Waveform, usize)> {
    if wave.len() < len {
        return Err(Error::Data(format!(
            "utterance of {} samples is shorter than the {len}-sample crop",
            wave.len()
        )));
    }
    let offset = rng.random_range(0..=wave.len() - len);
    Ok((wave.slice(offset, len)?, offset))
}

/// Crop of `wave` rescaled by the gain that brings the whole utterance to
/// [`MIX_RMS`].
fn normalized_crop(wave: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Result<(Waveform, usize)> {
    let r = rms(wave.samples());
    if r == 0.0 {
        return Err(Error::ZeroSignal("silent utterance in corpus".into()));
    }
    let (c, offset) = crop(wave, len, rng)?;
    Ok((c.scaled(MIX_RMS / r), offset))
}

/// Target speaker, target utterance and a distinct reference utterance.
fn pick_target(corpus: &Corpus, rng: &mut ChaCha8Rng) -> Result<(usize, usize, usize)> {
    let eligible: Vec<usize> = (0..corpus.n_speakers())
        .filter(|&s| corpus.speakers()[s].utterances.len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data(
            "no speaker has two utterances for target and reference".into(),
        ));
    }
    let s = eligible[rng.random_range(0..eligible.len())];
    let n = corpus.speakers()[s].utterances.len();
    let u = rng.random_range(0..n);
    let r = (u + rng.random_range(1..n)) % n;
    Ok((s, u, r))
}

/// Two distinct speakers, 3 s crops (by default), each source normalized and
/// summed at unit gain. Deterministic in `seed`.
pub fn simulate_two_speaker(corpus: &Corpus, spec: &MixSpec, seed: u64) -> Result<MixtureSample> {
    spec.validate()?;
    if corpus.n_speakers() < 2 {
        return Err(Error::Data(format!(
            "two-speaker mixing needs at least 2 speakers, corpus has {}",
            corpus.n_speakers()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, u, r) = pick_target(corpus, &mut rng)?;
    let n = corpus.n_speakers();
    let other = (s + rng.random_range(1..n)) % n;
    let spk = &corpus.speakers()[s];
    let oth = &corpus.speakers()[other];
    let ou = rng.random_range(0..oth.utterances.len());
    let len = spec.crop_len(spk.utterances[u].sample_rate());
    let (target, target_offset) = normalized_crop(&spk.utterances[u], len, &mut rng)?;
    let (interference, _) = normalized_crop(&oth.utterances[ou], len, &mut rng)?;
    let mixture = target.add(&interference)?;
    Ok(MixtureSample {
        mixture,
        target,
        reference: spk.utterances[r].clone(),
        interference,
        target_speaker: spk.id.clone(),
        interferer: Some(oth.id.clone()),
        snr_db: None,
        seed,
        reference_key: (s, r),
        target_key: (s, u),
        target_offset,
    })
}

/// One speaker crop plus a random noise crop at an SNR drawn uniformly from
/// `[snr_min, snr_max]`. Deterministic in `seed`.
pub fn simulate_noisy(corpus: &Corpus, noise: &NoiseSet, spec: &MixSpec, seed: u64) -> Result<MixtureSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, u, r) = pick_target(corpus, &mut rng)?;
    let spk = &corpus.speakers()[s];
    let len = spec.crop_len(spk.utterances[u].sample_rate());
    let (target, target_offset) = normalized_crop(&spk.utterances[u], len, &mut rng)?;
    let clip = &noise.clips()[rng.random_range(0..noise.clips().len())];
    let (noise_crop, _) = crop(clip, len, &mut rng)?;
    let snr = if spec.snr_max > spec.snr_min {
        rng.random_range(spec.snr_min..spec.snr_max)
    } else {
        spec.snr_min
    };
    let (mixture, interference) = mix_at_snr(&target, &noise_crop, snr)?;
    Ok(MixtureSample {
        mixture,
        target,
        reference: spk.utterances[r].clone(),
        interference,
        target_speaker: spk.id.clone(),
        interferer: None,
        snr_db: Some(snr),
        seed,
        reference_key: (s, r),
        target_key: (s, u),
        target_offset,
    })
}

/// Dispatches on `spec.mode`; noisy mode needs a noise set.
pub fn simulate(corpus: &Corpus, noise: Option<&NoiseSet>, spec: &MixSpec, seed: u64) -> Result<MixtureSample> {
    match spec.mode {
        MixMode::TwoSpeaker => simulate_two_speaker(corpus, spec, seed),
        MixMode::Noisy => {
            let noise = noise.ok_or_else(|| Error::Data("noisy mixing needs a noise set".into()))?;
            simulate_noisy(corpus, noise, spec, seed)
        }
    }
}

/// STFT of `wave` with `frame_len` zeros added at both ends, so that every
/// original sample lies under fully overlapping windows.
pub fn padded_stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let pad = vec![0.0; cfg.frame_len];
    let samples = [&pad[..], wave.samples(), &pad[..]].concat();
    stft(&Waveform::new(samples, wave.sample_rate())?, cfg)
}

/// Inverse of [`padded_stft`] for an original length of `len` samples.
pub fn trimmed_istft(spec: &ComplexSpectrogram, cfg: &StftConfig, len: usize, sample_rate: u32) -> Result<Waveform> {
    istft(spec, cfg, len + 2 * cfg.frame_len, sample_rate)?.slice(cfg.frame_len, len)
}

/// Seed of sample `index` in the stream rooted at `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

#[cfg(test)]
mod tests;
