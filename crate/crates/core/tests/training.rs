//! Short end-to-end training runs on synthetic voices.

use atss_core::corpus::{synthetic_corpus, Corpus, SynthSpec};
use atss_core::dsp::StftConfig;
use atss_core::model::{AtssModel, AttentionAxis, ModelConfig, Variant};
use atss_core::pipeline::{train_separator, MixSpec, SeparatorContext, TrainConfig, TrainHooks};
use atss_core::speaker::{cosine_similarity, train_embedder, EmbedderConfig, EmbedderTrainConfig, SpeakerEmbedder};

fn embedder_corpus() -> Corpus {
    synthetic_corpus(&SynthSpec {
        n_speakers: 8,
        utterances_per_speaker: 6,
        seconds: 1.5,
        ..SynthSpec::default()
    })
}

fn small_embedder(n_speakers: usize, embed_dim: usize) -> SpeakerEmbedder {
    SpeakerEmbedder::new(
        EmbedderConfig {
            channels: [8, 16, 32, 64],
            embed_dim,
            n_speakers,
            ..EmbedderConfig::default()
        },
        0,
    )
    .unwrap()
}

const EMBEDDER_TRAIN: EmbedderTrainConfig = EmbedderTrainConfig {
    epochs: 10,
    steps_per_epoch: 15,
    batch_size: 8,
    crop_frames: 32,
    lr: 3e-3,
    seed: 0,
};

#[test]
fn embedder_learns_speakers_and_is_gain_robust() {
    let corpus = embedder_corpus();
    let mut e = small_embedder(corpus.n_speakers(), 16);
    let report = train_embedder(&corpus, &mut e, &EMBEDDER_TRAIN).unwrap();
    assert!(report.epoch_losses[0] < report.initial_loss, "{report:?}");
    assert!(report.final_loss() < 0.5 * report.initial_loss, "{report:?}");
    assert!(report.final_accuracy() > 0.9, "{report:?}");

    // Fbank log energies shift with gain and mean normalization removes the
    // shift, so a doubled waveform embeds almost identically.
    for s in corpus.speakers() {
        let x = &s.utterances[0];
        let a = e.embed(x).unwrap();
        let b = e.embed(&x.scaled(2.0)).unwrap();
        assert!(cosine_similarity(a.values(), b.values()).unwrap() > 0.9);
    }
}

#[test]
fn embedder_training_is_deterministic() {
    let corpus = embedder_corpus();
    let cfg = EmbedderTrainConfig {
        epochs: 1,
        steps_per_epoch: 3,
        ..EMBEDDER_TRAIN
    };
    let mut a = small_embedder(corpus.n_speakers(), 8);
    let mut b = small_embedder(corpus.n_speakers(), 8);
    let ra = train_embedder(&corpus, &mut a, &cfg).unwrap();
    let rb = train_embedder(&corpus, &mut b, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn embedder_rejects_mismatched_class_count() {
    let corpus = embedder_corpus();
    let mut e = small_embedder(corpus.n_speakers() + 1, 8);
    assert!(train_embedder(&corpus, &mut e, &EMBEDDER_TRAIN).is_err());
    let mut bare = small_embedder(corpus.n_speakers(), 8).without_classifier();
    assert!(train_embedder(&corpus, &mut bare, &EMBEDDER_TRAIN).is_err());
}

#[test]
fn separator_loss_falls_and_history_reproduces() {
    let corpus = synthetic_corpus(&SynthSpec {
        n_speakers: 3,
        utterances_per_speaker: 4,
        seconds: 1.0,
        ..SynthSpec::default()
    });
    let emb = small_embedder(corpus.n_speakers(), 8);
    let stft = StftConfig::new(256, 128, 256).unwrap();
    let ctx = SeparatorContext {
        embedder: &emb,
        stft,
        mix: MixSpec {
            crop_seconds: 0.25,
            ..MixSpec::default()
        },
        noise: None,
    };
    let config = ModelConfig {
        n_blocks: 1,
        n_heads: 2,
        d_k: 4,
        freq_bins: stft.bins(),
        embed_dim: 8,
        attention_axis: AttentionAxis::Time,
        variant: Variant::Full,
    };
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 2,
        max_epochs: 3,
        patience: 3,
        steps_per_epoch: 20,
        val_size: 4,
        seed: 1,
    };
    let run = || {
        let mut m = AtssModel::new(config, 0).unwrap();
        train_separator(
            &corpus,
            &corpus,
            &ctx,
            &mut m,
            &cfg,
            &TrainHooks::default(),
            &mut |_| {},
        )
        .unwrap()
    };
    let a = run();
    let head: f64 = a.step_losses[..10].iter().sum();
    let tail: f64 = a.step_losses[a.step_losses.len() - 10..].iter().sum();
    assert!(tail < 0.7 * head, "{:?}", a.step_losses);

    let b = run();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(a.best, b.best);
}
