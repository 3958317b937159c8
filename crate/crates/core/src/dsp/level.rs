use super::Waveform;
use crate::error::{Error, Result};

/// Mean squared amplitude.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

pub fn rms(samples: &[f64]) -> f64 {
    power(samples).sqrt()
}

/// `10 log10(P_signal / P_noise)`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

/// Rescales `wave` so its RMS equals `target_rms`.
pub fn rms_normalize(wave: &Waveform, target_rms: f64) -> Result<Waveform> {
    let r = rms(wave.samples());
    if r == 0.0 {
        return Err(Error::ZeroSignal("cannot normalize an all-zero signal".into()));
    }
    Ok(wave.scaled(target_rms / r))
}

/// Scales `noise` so that speech-to-noise power ratio equals `snr_db` and adds
/// it to `speech`. Returns `(mixture, scaled_noise)`.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if speech.len() != noise.len() {
        return Err(Error::shape(format!(
            "speech has {} samples, noise has {}",
            speech.len(),
            noise.len()
        )));
    }
    let ps = power(speech.samples());
    let pn = power(noise.samples());
    if ps == 0.0 || pn == 0.0 {
        return Err(Error::ZeroSignal("speech and noise must both have power".into()));
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = noise.scaled(gain);
    let mixture = speech.add(&scaled)?;
    Ok((mixture, scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn wave(s: Vec<f64>) -> Waveform {
        Waveform::new(s, 16000).unwrap()
    }

    #[test]
    fn normalize_constant_and_sine() {
        let w = rms_normalize(&wave(vec![0.5; 100]), 0.05).unwrap();
        assert!(w.samples().iter().all(|v| (v - 0.05).abs() < 1e-15));

        let sine = wave(
            (0..16000)
                .map(|n| (2.0 * PI * 100.0 * n as f64 / 16000.0).sin())
                .collect(),
        );
        let w = rms_normalize(&sine, 0.05).unwrap();
        let peak = w.samples().iter().cloned().fold(0.0, f64::max);
        assert!((peak - 0.05 * 2f64.sqrt()).abs() < 1e-6);
        assert!((rms(w.samples()) - 0.05).abs() < 0.05 * 1e-9);

        let twice = rms_normalize(&w, 0.05).unwrap();
        for (a, b) in w.samples().iter().zip(twice.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            rms_normalize(&wave(vec![0.0; 4]), 0.05),
            Err(Error::ZeroSignal(_))
        ));
    }

    #[test]
    fn mix_gains() {
        let a = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let b = wave(vec![-1.0, 1.0, 1.0, -1.0]);
        let (_, n0) = mix_at_snr(&a, &b, 0.0).unwrap();
        assert!(n0.samples().iter().zip(b.samples()).all(|(x, y)| (x - y).abs() < 1e-15));
        let (m, n20) = mix_at_snr(&a, &b, 20.0).unwrap();
        assert!((n20.samples()[0] + 0.1).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(m.samples()[i], a.samples()[i] + n20.samples()[i]);
        }
        assert!(mix_at_snr(&a, &wave(vec![0.0; 4]), 5.0).is_err());
        assert!(mix_at_snr(&a, &wave(vec![1.0; 3]), 5.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn mix_hits_requested_snr(
            seed in any::<u64>(),
            snr in -10.0f64..30.0,
            len in 16usize..256,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = wave((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
            let n = wave((0..len).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (_, scaled) = mix_at_snr(&s, &n, snr).unwrap();
            prop_assert!((snr_db(s.samples(), scaled.samples()) - snr).abs() < 0.01);
        }
    }
}
