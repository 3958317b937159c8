//! Speaker-classification training of the embedder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{embedding_node, logits_node, SpeakerEmbedder, MIN_FRAMES};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Frames per training crop; utterances shorter than this are used whole.
    pub crop_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 8,
            crop_frames: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl EmbedderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs, steps and batch size must be positive"));
        }
        if self.crop_frames < MIN_FRAMES {
            return Err(Error::invalid(format!("crop_frames must be at least {MIN_FRAMES}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy and accuracy over full utterances, before training and
/// after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderTrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
}

impl EmbedderTrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&self.initial_loss)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epoch_accuracies.last().copied().unwrap_or(0.0)
    }
}

fn crop(feats: &Tensor, len: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (t, m) = (feats.shape()[0], feats.shape()[1]);
    if t <= len {
        return Ok(feats.clone());
    }
    let start = rng.random_range(0..=t - len);
    Tensor::new(vec![len, m], feats.data()[start * m..(start + len) * m].to_vec())
}

fn evaluate(model: &SpeakerEmbedder, set: &[(Tensor, usize)]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for (feats, label) in set {
        let mut g = Graph::new();
        let p = model.params.bind_frozen(&mut g);
        let e = embedding_node(&mut g, &p, feats)?;
        let l = logits_node(&mut g, &p, e)?;
        let z = g.value(l).data();
        let best = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
        correct += usize::from(best == Some(*label));
        let ce = g.cross_entropy(l, *label)?;
        loss += g.scalar(ce);
    }
    let n = set.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains embedder and classifier jointly with cross-entropy on random
/// feature crops, labels being speaker indices in `corpus` order.
/// Deterministic in `(corpus, model seed, cfg)`.
pub fn train_embedder(
    corpus: &Corpus,
    model: &mut SpeakerEmbedder,
    cfg: &EmbedderTrainConfig,
) -> Result<EmbedderTrainReport> {
    cfg.validate()?;
    if corpus.n_speakers() != model.config.n_speakers {
        return Err(Error::invalid(format!(
            "embedder has {} classes, corpus has {} speakers",
            model.config.n_speakers,
            corpus.n_speakers()
        )));
    }
    if !model.has_classifier() {
        return Err(Error::invalid("training needs the classification head"));
    }
    let mut set = Vec::with_capacity(corpus.num_utterances());
    for (label, s) in corpus.speakers().iter().enumerate() {
        for u in &s.utterances {
            set.push((model.features(u)?, label));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let (initial_loss, acc) = evaluate(model, &set)?;
    log::info!("embedder epoch 0: loss {initial_loss:.4} acc {acc:.3}");
    let mut report = EmbedderTrainReport {
        initial_loss,
        epoch_losses: Vec::new(),
        epoch_accuracies: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let mut total: Option<Vec<Tensor>> = None;
            for _ in 0..cfg.batch_size {
                let (feats, label) = &set[rng.random_range(0..set.len())];
                let x = crop(feats, cfg.crop_frames, &mut rng)?;
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let e = embedding_node(&mut g, &p, &x)?;
                let l = logits_node(&mut g, &p, e)?;
                let ce = g.cross_entropy(l, *label)?;
                if !g.scalar(ce).is_finite() {
                    return Err(Error::Numeric(format!("embedder loss is not finite at epoch {epoch}")));
                }
                let grads = model.params.collect_grads(&p, &g.backward(ce));
                match &mut total {
                    Some(t) => ParamStore::accumulate(t, &grads),
                    None => total = Some(grads),
                }
            }
            let mut grads = total.expect("batch is non-empty");
            let inv = 1.0 / cfg.batch_size as f32;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.step(&mut model.params, &grads)?;
        }
        let (loss, acc) = evaluate(model, &set)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("embedder loss is not finite at epoch {epoch}")));
        }
        log::info!("embedder epoch {epoch}: loss {loss:.4} acc {acc:.3}");
        report.epoch_losses.push(loss);
        report.epoch_accuracies.push(acc);
    }
    Ok(report)
}
