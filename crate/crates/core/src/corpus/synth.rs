//! Synthetic voiced "speakers": harmonic stacks on a per-speaker pitch, shaped
//! by per-speaker formant resonances and gated into syllables.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Corpus, NoiseSet, Speaker};
use crate::dsp::{rms_normalize, Waveform};

const TARGET_RMS: f64 = 0.05;
const MAX_HARMONIC_HZ: f64 = 7000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    /// Determines each speaker's voice; speaker `i` sounds the same in every
    /// corpus built with the same voice seed.
    pub voice_seed: u64,
    /// Determines utterance content.
    pub utterance_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 4,
            utterances_per_speaker: 8,
            seconds: 1.5,
            sample_rate: 16_000,
            voice_seed: 7,
            utterance_seed: 1,
        }
    }
}

/// Pitch and formant resonances `(center Hz, bandwidth Hz, gain)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formants: [(f64, f64, f64); 3],
}

impl Voice {
    /// Speaker `index` sits on a pitch ladder with a 16% step from 95 Hz, so
    /// any two speakers differ in pitch by at least that ratio.
    pub fn for_speaker(voice_seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(voice_seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let f0 = 95.0 * 1.16f64.powi(index as i32) * rng.random_range(0.98..1.02);
        let formants = [
            (rng.random_range(300.0..800.0), rng.random_range(80.0..160.0), 1.0),
            (
                rng.random_range(900.0..2300.0),
                rng.random_range(100.0..200.0),
                rng.random_range(0.4..0.8),
            ),
            (
                rng.random_range(2400.0..3400.0),
                rng.random_range(150.0..250.0),
                rng.random_range(0.15..0.4),
            ),
        ];
        Self { f0, formants }
    }

    fn envelope(&self, hz: f64, shift: f64) -> f64 {
        let mut a = 0.02;
        for &(c, b, g) in &self.formants {
            let x = (hz - c * shift) / b;
            a += g / (1.0 + x * x);
        }
        a
    }
}

/// Raised-cosine ramps at both ends of an `on`-sample segment.
fn gate(i: usize, on: usize, ramp: usize) -> f64 {
    let r = ramp.min(on / 2).max(1);
    if i < r {
        0.5 - 0.5 * (PI * i as f64 / r as f64).cos()
    } else if i + r > on {
        0.5 - 0.5 * (PI * (on - i) as f64 / r as f64).cos()
    } else {
        1.0
    }
}

/// One utterance of `voice`: syllables of 100-300 ms separated by 30-120 ms
/// pauses, each with its own pitch glide and formant shift, over a faint
/// noise floor. RMS-normalized.
pub fn synth_utterance(voice: &Voice, seconds: f64, sample_rate: u32, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let mut out = vec![0.0f64; n];
    let mut pos = (rng.random_range(0.0..0.05) * sr) as usize;
    let mut phase = 0.0f64;
    let ramp = (0.015 * sr) as usize;
    while pos < n {
        let on = ((rng.random_range(0.10..0.30) * sr) as usize).min(n - pos);
        let f_start = voice.f0 * rng.random_range(0.96..1.04);
        let f_end = voice.f0 * rng.random_range(0.96..1.04);
        let shift = rng.random_range(0.9..1.1);
        let loud = rng.random_range(0.6..1.0);
        let k_max = (MAX_HARMONIC_HZ / (f_start.max(f_end) * 1.01)).floor() as usize;
        // Per-harmonic amplitude split into sine and cosine parts of a random
        // phase offset, so the stack is a rotation recurrence per sample.
        let coef: Vec<(f64, f64)> = (1..=k_max)
            .map(|k| {
                let a = voice.envelope(k as f64 * voice.f0, shift);
                let phi = rng.random_range(0.0..2.0 * PI);
                (a * phi.cos(), a * phi.sin())
            })
            .collect();
        for i in 0..on {
            let frac = i as f64 / on.max(1) as f64;
            let f0 =
                (f_start + (f_end - f_start) * frac) * (1.0 + 0.005 * (2.0 * PI * 5.0 * (pos + i) as f64 / sr).sin());
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            let (s1, c1) = phase.sin_cos();
            let (mut s, mut c) = (s1, c1);
            let mut acc = 0.0;
            for &(ac, as_) in &coef {
                acc += ac * s + as_ * c;
                let (ns, nc) = (s * c1 + c * s1, c * c1 - s * s1);
                s = ns;
                c = nc;
            }
            out[pos + i] += loud * gate(i, on, ramp) * acc;
        }
        pos += on + (rng.random_range(0.03..0.12) * sr) as usize;
    }
    let peak_rms = crate::dsp::rms(&out).max(1e-12);
    let floor = Normal::new(0.0, peak_rms * 2e-3).expect("finite std");
    for v in &mut out {
        *v += floor.sample(rng);
    }
    let w = Waveform::new(out, sample_rate).expect("finite synthesis");
    rms_normalize(&w, TARGET_RMS).expect("non-silent synthesis")
}

/// Corpus of `n_speakers` synthetic voices with ids `spk00`, `spk01`, ...
pub fn synthetic_corpus(spec: &SynthSpec) -> Corpus {
    let speakers = (0..spec.n_speakers)
        .map(|i| {
            let voice = Voice::for_speaker(spec.voice_seed, i);
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.utterance_seed.wrapping_mul(1_000_003) ^ ((i as u64 + 1) << 20));
            Speaker {
                id: format!("spk{i:02}"),
                utterances: (0..spec.utterances_per_speaker)
                    .map(|_| synth_utterance(&voice, spec.seconds, spec.sample_rate, &mut rng))
                    .collect(),
            }
        })
        .collect();
    Corpus::new(speakers).expect("every synthetic speaker has utterances")
}

/// Coloured noise clips: white noise through a random one-pole low-pass,
/// slow amplitude modulation and, on some clips, a hum tone. RMS-normalized.
pub fn synthetic_noise(n_clips: usize, seconds: f64, sample_rate: u32, seed: u64) -> NoiseSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let white = Normal::new(0.0, 1.0).expect("unit normal");
    let clips = (0..n_clips.max(1))
        .map(|_| {
            let pole: f64 = rng.random_range(0.0..0.95);
            let am_rate = rng.random_range(0.2..3.0);
            let am_depth = rng.random_range(0.0..0.6);
            let hum = rng
                .random_bool(0.5)
                .then(|| (rng.random_range(50.0..400.0), rng.random_range(0.2..1.0)));
            let mut y = 0.0;
            let data = (0..n)
                .map(|i| {
                    y = pole * y + (1.0 - pole) * white.sample(&mut rng);
                    let t = i as f64 / sr;
                    let mut v = y * (1.0 - am_depth * (0.5 + 0.5 * (2.0 * PI * am_rate * t).sin()));
                    if let Some((f, a)) = hum {
                        v += a * 0.3 * (2.0 * PI * f * t).sin();
                    }
                    v
                })
                .collect();
            let w = Waveform::new(data, sample_rate).expect("finite noise");
            rms_normalize(&w, TARGET_RMS).expect("non-silent noise")
        })
        .collect();
    NoiseSet::new(clips).expect("at least one clip")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{magnitude_phase, rms, stft, StftConfig};

    #[test]
    fn deterministic_and_normalized() {
        let spec = SynthSpec {
            n_speakers: 3,
            utterances_per_speaker: 2,
            seconds: 0.5,
            ..SynthSpec::default()
        };
        let a = synthetic_corpus(&spec);
        assert_eq!(a, synthetic_corpus(&spec));
        for s in a.speakers() {
            for u in &s.utterances {
                assert_eq!(u.len(), 8000);
                assert!((rms(u.samples()) - 0.05).abs() < 1e-12);
            }
        }
        let other = synthetic_corpus(&SynthSpec {
            utterance_seed: 2,
            ..spec
        });
        assert_ne!(a.speakers()[0].utterances[0], other.speakers()[0].utterances[0]);
        let n = synthetic_noise(3, 0.5, 16000, 1);
        assert_eq!(n.clips().len(), 3);
        assert_eq!(n, synthetic_noise(3, 0.5, 16000, 1));
    }

    #[test]
    fn voices_are_stable_across_corpus_sizes() {
        assert_eq!(Voice::for_speaker(7, 2), Voice::for_speaker(7, 2));
        let f: Vec<f64> = (0..8).map(|i| Voice::for_speaker(7, i).f0).collect();
        for w in f.windows(2) {
            assert!(w[1] / w[0] > 1.1);
        }
    }

    #[test]
    fn spectral_peak_near_a_harmonic() {
        let v = Voice::for_speaker(7, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = synth_utterance(&v, 1.0, 16000, &mut rng);
        let cfg = StftConfig::new(1024, 512, 1024).unwrap();
        let (mag, _) = magnitude_phase(&stft(&w, &cfg).unwrap());
        let mut avg = vec![0.0; mag.bins()];
        for t in 0..mag.frames() {
            for (a, m) in avg.iter_mut().zip(mag.frame(t)) {
                *a += m;
            }
        }
        let peak = avg.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as f64 * 16000.0 / 1024.0;
        let k = (peak / v.f0).round();
        assert!(
            k >= 1.0 && (peak - k * v.f0).abs() < 0.08 * peak + 16.0,
            "peak {peak} f0 {}",
            v.f0
        );
    }
}
