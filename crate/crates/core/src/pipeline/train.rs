//! Separator training with a fixed validation set and early stopping.

use std::collections::HashMap;

use super::{padded_stft, sample_seed, simulate, MixSpec, MixtureSample};
use crate::corpus::{Corpus, NoiseSet};
use crate::dsp::{magnitude_phase, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{atss_forward, magnitude_tensor, masked_l2_node, pit_loss_node, AtssModel};
use crate::speaker::SpeakerEmbedder;
use crate::tensor::{AdamConfig, AdamState, Graph, NodeId, ParamStore, Tensor};

/// Validation samples draw from a seed stream disjoint from training.
const VAL_SALT: u64 = 0x5eed_0f_7a11d;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub steps_per_epoch: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 10,
            steps_per_epoch: 100,
            val_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.batch_size,
            self.max_epochs,
            self.patience,
            self.steps_per_epoch,
            self.val_size,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid(
                "batch size, epochs, patience, steps and validation size must be positive",
            ));
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

/// Test and fault-injection hooks; all off by default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHooks {
    /// Replace the loss of this (0-based) optimizer step with NaN.
    pub nan_at_step: Option<usize>,
    /// Use these values as the per-epoch validation losses instead of
    /// computing them.
    pub scripted_val_losses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Stops once `patience` consecutive epochs bring no new strict minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's validation loss and returns whether it is a new
    /// minimum.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b || loss.is_nan() => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters at the best validation epoch.
    pub best: AtssModel,
    pub stopped_early: bool,
}

/// Everything the separator needs besides its own weights.
#[derive(Debug, Clone, Copy)]
pub struct SeparatorContext<'a> {
    pub embedder: &'a SpeakerEmbedder,
    pub stft: StftConfig,
    pub mix: MixSpec,
    pub noise: Option<&'a NoiseSet>,
}

impl SeparatorContext<'_> {
    pub fn check(&self, model: &AtssModel) -> Result<()> {
        self.stft.validate()?;
        if model.config.freq_bins != self.stft.bins() {
            return Err(Error::invalid(format!(
                "model expects {} frequency bins, STFT gives {}",
                model.config.freq_bins,
                self.stft.bins()
            )));
        }
        if model.config.uses_embedding() && model.config.embed_dim != self.embedder.config.embed_dim {
            return Err(Error::invalid(format!(
                "model expects {}-dim embeddings, embedder gives {}",
                model.config.embed_dim, self.embedder.config.embed_dim
            )));
        }
        Ok(())
    }
}

/// Network inputs and targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mag: Tensor,
    /// Target magnitude first; the interference magnitude follows for
    /// permutation-invariant training.
    pub targets: Vec<Tensor>,
    pub embedding: Option<Vec<f32>>,
}

fn magnitude(wave: &Waveform, cfg: &StftConfig) -> Result<Tensor> {
    Ok(magnitude_tensor(&magnitude_phase(&padded_stft(wave, cfg)?).0))
}

/// Embeds references once per `(speaker, utterance)`.
#[derive(Debug, Default)]
struct EmbeddingCache(HashMap<(usize, usize), Vec<f32>>);

impl EmbeddingCache {
    fn get(&mut self, embedder: &SpeakerEmbedder, sample: &MixtureSample) -> Result<Vec<f32>> {
        if let Some(e) = self.0.get(&sample.reference_key) {
            return Ok(e.clone());
        }
        let e = embedder.embed(&sample.reference)?.0;
        self.0.insert(sample.reference_key, e.clone());
        Ok(e)
    }
}

fn example(
    ctx: &SeparatorContext<'_>,
    model: &AtssModel,
    sample: &MixtureSample,
    cache: &mut EmbeddingCache,
) -> Result<Example> {
    let mut targets = vec![magnitude(&sample.target, &ctx.stft)?];
    if !model.config.uses_embedding() {
        targets.push(magnitude(&sample.interference, &ctx.stft)?);
    }
    Ok(Example {
        mag: magnitude(&sample.mixture, &ctx.stft)?,
        targets,
        embedding: if model.config.uses_embedding() {
            Some(cache.get(ctx.embedder, sample)?)
        } else {
            None
        },
    })
}

/// Inputs and targets for `sample` without caching.
pub fn prepare_example(ctx: &SeparatorContext<'_>, model: &AtssModel, sample: &MixtureSample) -> Result<Example> {
    example(ctx, model, sample, &mut EmbeddingCache::default())
}

/// Masked-magnitude l2 loss (or its best-permutation form without an
/// embedding) recorded on `g`.
fn loss_node(g: &mut Graph, p: &crate::tensor::Bound<'_>, model: &AtssModel, ex: &Example) -> Result<NodeId> {
    let masks = atss_forward(g, p, &model.config, &ex.mag, ex.embedding.as_deref())?;
    if model.config.uses_embedding() {
        masked_l2_node(g, &ex.mag, masks[0], &ex.targets[0])
    } else {
        Ok(pit_loss_node(g, &ex.mag, &masks, &ex.targets)?.0)
    }
}

fn example_loss(model: &AtssModel, ex: &Example) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let l = loss_node(&mut g, &p, model, ex)?;
    Ok(g.scalar(l))
}

/// Trains `model` in place on mixtures simulated from `train`, validating on
/// a fixed seeded set from `val` after every epoch. `on_epoch` sees each
/// record as soon as it exists. On a non-finite loss the run aborts with
/// [`Error::Numeric`] and `model` holds the last finite state.
pub fn train_separator(
    train: &Corpus,
    val: &Corpus,
    ctx: &SeparatorContext<'_>,
    model: &mut AtssModel,
    cfg: &TrainConfig,
    hooks: &TrainHooks,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ctx.check(model)?;
    let mut val_cache = EmbeddingCache::default();
    let val_set = (0..cfg.val_size as u64)
        .map(|i| {
            let s = simulate(val, ctx.noise, &ctx.mix, sample_seed(cfg.seed ^ VAL_SALT, i))?;
            example(ctx, model, &s, &mut val_cache)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cache = EmbeddingCache::default();
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = model.clone();
    let mut stopped_early = false;
    let inv = 1.0 / cfg.batch_size as f32;
    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let step = step_losses.len();
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for b in 0..cfg.batch_size {
                let seed = sample_seed(cfg.seed, (step * cfg.batch_size + b) as u64);
                let sample = simulate(train, ctx.noise, &ctx.mix, seed)?;
                let ex = example(ctx, model, &sample, &mut cache)?;
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let l = loss_node(&mut g, &p, model, &ex)?;
                let mut value = g.scalar(l);
                if hooks.nan_at_step == Some(step) {
                    value = f64::NAN;
                }
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {value} at epoch {epoch}, step {step}, sample seed {seed}"
                    )));
                }
                batch_loss += value;
                let grads = model.params.collect_grads(&p, &g.backward(l));
                match &mut total {
                    Some(t) => ParamStore::accumulate(t, &grads),
                    None => total = Some(grads),
                }
            }
            let mut grads = total.expect("batch is non-empty");
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} is not finite at epoch {epoch}, step {step}",
                    model.params.names()[bad]
                )));
            }
            adam.step(&mut model.params, &grads)?;
            let mean = batch_loss / cfg.batch_size as f64;
            step_losses.push(mean);
            epoch_loss += mean;
        }
        let val_loss = match &hooks.scripted_val_losses {
            Some(script) => *script
                .get(epoch - 1)
                .ok_or_else(|| Error::invalid(format!("no scripted validation loss for epoch {epoch}")))?,
            None => {
                let mut s = 0.0;
                for ex in &val_set {
                    s += example_loss(model, ex)?;
                }
                s / val_set.len() as f64
            }
        };
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is {val_loss} at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / cfg.steps_per_epoch as f64,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6}",
            record.train_loss,
            record.val_loss
        );
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        step_losses,
        best_epoch,
        best_val_loss,
        best,
        stopped_early,
    })
}
