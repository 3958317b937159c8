use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::*;
use crate::corpus::{synthetic_corpus, synthetic_noise, Speaker, SynthSpec};
use crate::dsp::{power, snr_db, StftConfig};
use crate::model::{AtssModel, AttentionAxis, ModelConfig, Variant};
use crate::speaker::{EmbedderConfig, SpeakerEmbedder};

fn short_spec() -> MixSpec {
    MixSpec {
        crop_seconds: 0.25,
        ..MixSpec::default()
    }
}

fn corpus(n: usize, secs: f64) -> Corpus {
    synthetic_corpus(&SynthSpec {
        n_speakers: n,
        utterances_per_speaker: 3,
        seconds: secs,
        ..SynthSpec::default()
    })
}

/// Two-sided Kolmogorov-Smirnov p-value (asymptotic series) of `xs` against
/// Uniform[lo, hi].
fn ks_uniform_p(xs: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().map(|x| (x - lo) / (hi - lo)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &u)| (u - i as f64 / n).max((i + 1) as f64 / n - u))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

#[test]
fn ks_helper_matches_known_values() {
    // Q(1.36) ~ 0.049 and Q(0.5) ~ 0.964 for the Kolmogorov distribution.
    let q = |l: f64| -> f64 {
        (1..=100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * l * l).exp()
            })
            .sum()
    };
    assert!((q(1.36) - 0.0494).abs() < 1e-3);
    assert!((q(0.5) - 0.9639).abs() < 1e-3);
    let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
    assert!(ks_uniform_p(&even, 0.0, 1.0) > 0.99);
    let skewed: Vec<f64> = even.iter().map(|x| x * x).collect();
    assert!(ks_uniform_p(&skewed, 0.0, 1.0) < 1e-6);
}

#[test]
fn mix_mode_parses() {
    assert_eq!("noisy".parse::<MixMode>().unwrap(), MixMode::Noisy);
    assert_eq!(
        MixMode::TwoSpeaker.to_string().parse::<MixMode>().unwrap(),
        MixMode::TwoSpeaker
    );
    assert!("both".parse::<MixMode>().is_err());
}

#[test]
fn two_speaker_contract() {
    let c = corpus(3, 0.5);
    let spec = short_spec();
    for seed in 0..20 {
        let s = simulate_two_speaker(&c, &spec, seed).unwrap();
        assert_eq!(s, simulate_two_speaker(&c, &spec, seed).unwrap());
        assert_eq!(s.mixture.len(), 4000);
        assert_eq!(s.target.len(), 4000);
        assert_eq!(s.interference.len(), 4000);
        assert_ne!(Some(&s.target_speaker), s.interferer.as_ref());
        assert_eq!(s.reference_key.0, s.target_key.0);
        assert_ne!(s.reference_key.1, s.target_key.1);
        assert_eq!(
            s.reference,
            c.speakers()[s.reference_key.0].utterances[s.reference_key.1]
        );
        for ((m, t), i) in s
            .mixture
            .samples()
            .iter()
            .zip(s.target.samples())
            .zip(s.interference.samples())
        {
            assert_eq!(*m, t + i);
        }
        // Target is the utterance crop, rescaled by the utterance gain.
        let src = &c.speakers()[s.target_key.0].utterances[s.target_key.1];
        let gain = MIX_RMS / crate::dsp::rms(src.samples());
        assert_eq!(s.target.samples()[7], src.samples()[s.target_offset + 7] * gain);
    }
}

#[test]
fn two_speaker_errors() {
    let one = corpus(1, 0.5);
    assert!(matches!(
        simulate_two_speaker(&one, &short_spec(), 0),
        Err(Error::Data(_))
    ));
    let long = MixSpec {
        crop_seconds: 1.0,
        ..MixSpec::default()
    };
    assert!(matches!(
        simulate_two_speaker(&corpus(2, 0.5), &long, 0),
        Err(Error::Data(_))
    ));
    let single = Corpus::new(vec![
        Speaker {
            id: "a".into(),
            utterances: vec![Waveform::new(vec![0.1; 8000], 16000).unwrap()],
        },
        Speaker {
            id: "b".into(),
            utterances: vec![Waveform::new(vec![0.1; 8000], 16000).unwrap()],
        },
    ])
    .unwrap();
    assert!(matches!(
        simulate_two_speaker(&single, &short_spec(), 0),
        Err(Error::Data(_))
    ));
}

#[test]
fn two_speaker_draws_are_distinct_and_offsets_uniform() {
    let c = corpus(4, 0.3);
    let spec = MixSpec {
        crop_seconds: 0.05,
        ..MixSpec::default()
    };
    let span = 4800 - 800 + 1;
    let bins = 10;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for i in 0..draws {
        let s = simulate_two_speaker(&c, &spec, sample_seed(3, i)).unwrap();
        assert_ne!(Some(&s.target_speaker), s.interferer.as_ref());
        counts[s.target_offset * bins / span] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p} counts {counts:?}");
}

#[test]
fn noisy_snr_matches_metadata_and_is_uniform() {
    let c = corpus(2, 0.3);
    let noise = synthetic_noise(3, 0.4, 16000, 5);
    let spec = MixSpec {
        mode: MixMode::Noisy,
        crop_seconds: 0.05,
        ..MixSpec::default()
    };
    let mut snrs = Vec::new();
    for i in 0..10_000 {
        let s = simulate(&c, Some(&noise), &spec, sample_seed(11, i)).unwrap();
        let meta = s.snr_db.unwrap();
        assert!((5.0..=20.0).contains(&meta));
        assert_eq!(s.interference.len(), s.target.len());
        assert!((snr_db(s.target.samples(), s.interference.samples()) - meta).abs() < 0.01);
        for ((m, t), n) in s
            .mixture
            .samples()
            .iter()
            .zip(s.target.samples())
            .zip(s.interference.samples())
        {
            assert_eq!(*m, t + n);
        }
        snrs.push(meta);
    }
    let p = ks_uniform_p(&snrs, 5.0, 20.0);
    assert!(p > 0.01, "KS p {p}");
    assert!(simulate(&c, None, &spec, 0).is_err());
}

#[test]
fn sdr_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reference = Waveform::new(r.clone(), 16000).unwrap();
    assert_eq!(sdr(&reference, &reference).unwrap(), SDR_CAP_DB);
    assert_eq!(sdr(&reference, &reference.scaled(2.0)).unwrap(), SDR_CAP_DB);
    // Noise made orthogonal to the reference, at 1/100 of its power.
    let n: Vec<f64> = (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proj = n.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / r.iter().map(|v| v * v).sum::<f64>();
    let n: Vec<f64> = n.iter().zip(&r).map(|(a, b)| a - proj * b).collect();
    let g = (power(&r) / (100.0 * power(&n))).sqrt();
    let est = Waveform::new(r.iter().zip(&n).map(|(a, b)| a + g * b).collect(), 16000).unwrap();
    assert!((sdr(&reference, &est).unwrap() - 20.0).abs() < 0.1);
    let ortho = Waveform::new(n, 16000).unwrap();
    assert_eq!(sdr(&reference, &ortho).unwrap(), -SDR_CAP_DB);
    assert!(matches!(
        sdr(&Waveform::zeros(10, 16000), &reference.slice(0, 10).unwrap()),
        Err(Error::ZeroSignal(_))
    ));
    assert!(sdr(&reference, &Waveform::zeros(10, 16000)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sdr_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0, noise in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|v| v + noise * rng.random_range(-1.0..1.0)).collect();
        let reference = Waveform::new(r, 16000).unwrap();
        let est = Waveform::new(e, 16000).unwrap();
        let a = sdr(&reference, &est).unwrap();
        let b = sdr(&reference, &est.scaled(c)).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        prop_assert!(a < SDR_CAP_DB);
    }
}

#[test]
fn report_means_and_identity_hook() {
    let c = corpus(3, 0.5);
    let samples: Vec<_> = (0..4)
        .map(|i| simulate_two_speaker(&c, &short_spec(), i).unwrap())
        .collect();
    let report = eval::evaluate_with(&samples, &[], |s| Ok(s.target.clone())).unwrap();
    assert_eq!(report.n, 4);
    for row in &report.samples {
        assert_eq!(row.after, SDR_CAP_DB);
    }
    let before: f64 = report.samples.iter().map(|r| r.before).sum::<f64>() / 4.0;
    assert!((report.sdr_before_mean - before).abs() < 1e-9);
    assert!((report.sdr_improved_mean - (SDR_CAP_DB - before)).abs() < 1e-9);
    assert!((report.sdr_improved_mean - (report.sdr_after_mean - report.sdr_before_mean)).abs() < 1e-9);
    assert_eq!(report.samples[2].id, "00002");
    assert!(report.summary_line().starts_with("SDR before="));
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    assert!(matches!(EvalReport::from_rows(vec![]), Err(Error::Data(_))));
}

fn toy_setup(variant: Variant) -> (SpeakerEmbedder, AtssModel, StftConfig) {
    let embedder = SpeakerEmbedder::new(
        EmbedderConfig {
            channels: [2, 2, 4, 4],
            embed_dim: 4,
            n_speakers: 3,
            ..EmbedderConfig::default()
        },
        0,
    )
    .unwrap();
    let stft = StftConfig::new(64, 32, 64).unwrap();
    let model = AtssModel::new(
        ModelConfig {
            n_blocks: 1,
            n_heads: 2,
            d_k: 4,
            freq_bins: stft.bins(),
            embed_dim: 4,
            attention_axis: AttentionAxis::Time,
            variant,
        },
        1,
    )
    .unwrap();
    (embedder, model, stft)
}

#[test]
fn separate_contract_and_ones_mask() {
    let c = corpus(3, 0.5);
    let s = simulate_two_speaker(&c, &short_spec(), 4).unwrap();
    let (embedder, model, stft) = toy_setup(Variant::Full);
    let out = separate(&s.mixture, &s.reference, &embedder, &model, &stft, MaskOverride::Model).unwrap();
    assert_eq!(out.len(), s.mixture.len());
    assert_eq!(
        out,
        separate(&s.mixture, &s.reference, &embedder, &model, &stft, MaskOverride::Model).unwrap()
    );
    let same = separate(&s.mixture, &s.reference, &embedder, &model, &stft, MaskOverride::Ones).unwrap();
    // Padding puts every sample under full window overlap, edges included.
    for (a, b) in same.samples().iter().zip(s.mixture.samples()) {
        assert!((a - b).abs() < 1e-6);
    }
    let pit = toy_setup(Variant::Pit).1;
    let report = evaluate(&[s], &[], &embedder, &pit, &stft, MaskOverride::Model).unwrap();
    assert!(report.sdr_after_mean.is_finite());
}

#[test]
fn early_stopping_counts_epochs_without_a_new_minimum() {
    let mut e = EarlyStopping::new(3);
    let losses = [5.0, 4.0, 4.0, 4.5, 3.9, 4.1, 3.9, 5.0, 1.0];
    let mut stopped_at = None;
    for (i, &l) in losses.iter().enumerate() {
        e.observe(i + 1, l);
        if e.should_stop() {
            stopped_at = Some(i + 1);
            break;
        }
    }
    // 3.9 at epoch 5 is the last strict minimum; epochs 6, 7, 8 do not improve.
    assert_eq!(stopped_at, Some(8));
    assert_eq!(e.best(), Some((5, 3.9)));
}

fn quick_train(hooks: &TrainHooks, max_epochs: usize) -> (Result<TrainOutcome>, AtssModel) {
    let c = corpus(3, 0.5);
    let (embedder, mut model, stft) = toy_setup(Variant::Full);
    let ctx = SeparatorContext {
        embedder: &embedder,
        stft,
        mix: short_spec(),
        noise: None,
    };
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        max_epochs,
        patience: 2,
        steps_per_epoch: 2,
        val_size: 3,
        seed: 9,
    };
    let out = train_separator(&c, &c, &ctx, &mut model, &cfg, hooks, &mut |_| {});
    (out, model)
}

#[test]
fn training_keeps_the_best_checkpoint() {
    let hooks = TrainHooks {
        scripted_val_losses: Some(vec![3.0, 2.0, 2.5, 2.0, 9.0]),
        ..TrainHooks::default()
    };
    let (out, last) = quick_train(&hooks, 10);
    let out = out.unwrap();
    assert_eq!(out.history.len(), 4);
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 2);
    assert_eq!(out.best_val_loss, 2.0);
    assert_ne!(out.best, last);
    assert_eq!(out.step_losses.len(), 8);
    let (again, _) = quick_train(&hooks, 10);
    assert_eq!(again.unwrap(), out);
}

#[test]
fn validation_set_is_fixed() {
    let (out, _) = quick_train(&TrainHooks::default(), 2);
    let out = out.unwrap();
    assert_eq!(out.history.len(), 2);
    assert!(out
        .history
        .iter()
        .all(|r| r.val_loss.is_finite() && r.train_loss.is_finite()));
    let (again, _) = quick_train(&TrainHooks::default(), 2);
    let again = again.unwrap();
    assert_eq!(
        again.history.iter().map(|r| r.val_loss.to_bits()).collect::<Vec<_>>(),
        out.history.iter().map(|r| r.val_loss.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn injected_nan_aborts_with_last_finite_state() {
    let hooks = TrainHooks {
        nan_at_step: Some(3),
        ..TrainHooks::default()
    };
    let (out, model) = quick_train(&hooks, 5);
    let err = out.unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("step 3"), "{err}");
    assert!(model.params.tensors().iter().all(|t| t.is_finite()));
}

#[test]
fn ablation_variants() {
    let (_, full, _) = toy_setup(Variant::Full);
    let bare = ablate(&full, Variant::NoAttention).unwrap();
    assert!(bare.num_params() < full.num_params());
    assert_eq!(bare.params.get("block0.ffn.w1"), full.params.get("block0.ffn.w1"));
    assert!(ablate(&bare, Variant::Full).is_err());
    assert!(ablate(&full, Variant::Pit).is_err());
    assert_eq!(ablate(&full, Variant::Full).unwrap(), full);
}

#[test]
fn stored_samples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(3, 0.5);
    let samples: Vec<_> = (0..3)
        .map(|i| simulate_two_speaker(&c, &short_spec(), i).unwrap())
        .collect();
    let index = write_samples(dir.path(), MixMode::TwoSpeaker, &samples).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 10);
    let (records, back) = read_samples(&index).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[1].mixture, "mixture_00001.wav");
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.mixture.len(), b.mixture.len());
        for (x, y) in a.mixture.samples().iter().zip(b.mixture.samples()) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
        assert_eq!(a.target_speaker, b.target_speaker);
    }
    std::fs::write(&index, "{\"mode\":\"noisy\",\"count\":0,\"samples\":[]}").unwrap();
    assert!(matches!(read_samples(&index), Err(Error::Data(_))));
}
