//! Inference, SDR scoring and ablation runs.

use serde::{Deserialize, Serialize};

use super::train::{train_separator, SeparatorContext, TrainConfig, TrainHooks, TrainOutcome};
use super::{padded_stft, trimmed_istft, MixtureSample};
use crate::corpus::Corpus;
use crate::dsp::{magnitude_phase, reconstruct, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::{apply_mask, pit_loss, AtssModel, Mask, ModelConfig, Variant};
use crate::speaker::SpeakerEmbedder;

/// Upper (and, negated, lower) bound on reported SDR.
pub const SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant SDR of `estimate` against `reference`, in dB:
/// `α = <est, ref> / |ref|²`, `10 log10(|α ref|² / |est - α ref|²)`, clamped
/// to `±60`.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let (r, e) = (reference.samples(), estimate.samples());
    if r.len() != e.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, estimate {}",
            r.len(),
            e.len()
        )));
    }
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::ZeroSignal("SDR reference is all zeros".into()));
    }
    let alpha = r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let signal = alpha * alpha * rr;
    let residual: f64 = r.iter().zip(e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    if residual < 1e-12 * signal {
        return Ok(SDR_CAP_DB);
    }
    if signal == 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// Debug override of the model's mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskOverride {
    #[default]
    Model,
    /// Every cell passes through unchanged.
    Ones,
}

/// Applies `pick` to the mixture's magnitude to obtain a mask, then
/// resynthesizes with the mixture phase. Output length equals input length.
pub fn separate_with_mask(
    mixture: &Waveform,
    cfg: &StftConfig,
    pick: impl FnOnce(&crate::dsp::MagnitudeSpectrogram) -> Result<Mask>,
) -> Result<Waveform> {
    let spec = padded_stft(mixture, cfg)?;
    let (mag, phase) = magnitude_phase(&spec);
    let mask = pick(&mag)?;
    let est = apply_mask(&mag, &mask)?;
    trimmed_istft(
        &reconstruct(&est, &phase, cfg)?,
        cfg,
        mixture.len(),
        mixture.sample_rate(),
    )
}

/// Target-speaker estimate from `mixture` given a `reference` utterance.
/// Models without an embedding input return their first output.
pub fn separate(
    mixture: &Waveform,
    reference: &Waveform,
    embedder: &SpeakerEmbedder,
    model: &AtssModel,
    cfg: &StftConfig,
    mask: MaskOverride,
) -> Result<Waveform> {
    separate_with_mask(mixture, cfg, |mag| match mask {
        MaskOverride::Ones => Ok(Mask::ones(mag.frames(), mag.bins())),
        MaskOverride::Model => {
            let emb = if model.config.uses_embedding() {
                Some(embedder.embed(reference)?.0)
            } else {
                None
            };
            Ok(model.predict(mag, emb.as_deref())?.swap_remove(0))
        }
    })
}

/// Like [`separate`], but an embedding-free model's outputs are assigned to
/// (target, interference) by the permutation with the lower magnitude loss,
/// and the output assigned to the target is returned.
fn separate_sample(
    sample: &MixtureSample,
    embedder: &SpeakerEmbedder,
    model: &AtssModel,
    cfg: &StftConfig,
    over: MaskOverride,
) -> Result<Waveform> {
    if model.config.uses_embedding() || over == MaskOverride::Ones {
        return separate(&sample.mixture, &sample.reference, embedder, model, cfg, over);
    }
    let target = magnitude_phase(&padded_stft(&sample.target, cfg)?).0;
    let interference = magnitude_phase(&padded_stft(&sample.interference, cfg)?).0;
    separate_with_mask(&sample.mixture, cfg, |mag| {
        let mut masks = model.predict(mag, None)?;
        let (_, perm) = pit_loss(&masks, mag, &[target, interference])?;
        let i = (0..masks.len()).find(|&i| perm.target_of(i) == 0).unwrap_or(0);
        Ok(masks.swap_remove(i))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub sdr_before_mean: f64,
    pub sdr_after_mean: f64,
    pub sdr_improved_mean: f64,
    pub samples: Vec<EvalRow>,
}

impl EvalReport {
    /// Means over `rows`, accumulated in row order.
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        let n = rows.len() as f64;
        let before = rows.iter().map(|r| r.before).sum::<f64>() / n;
        let after = rows.iter().map(|r| r.after).sum::<f64>() / n;
        Ok(Self {
            n: rows.len(),
            sdr_before_mean: before,
            sdr_after_mean: after,
            sdr_improved_mean: after - before,
            samples: rows,
        })
    }

    /// `SDR before=%.2f after=%.2f improved=%.2f`.
    pub fn summary_line(&self) -> String {
        format!(
            "SDR before={:.2} after={:.2} improved={:.2}",
            self.sdr_before_mean, self.sdr_after_mean, self.sdr_improved_mean
        )
    }
}

/// SDR of mixture and of `estimator`'s output against each target. Rows are
/// labelled `ids[i]`, or by position when `ids` is empty.
pub fn evaluate_with(
    samples: &[MixtureSample],
    ids: &[String],
    mut estimator: impl FnMut(&MixtureSample) -> Result<Waveform>,
) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let est = estimator(s)?;
            Ok(EvalRow {
                id: ids.get(i).cloned().unwrap_or_else(|| format!("{i:05}")),
                snr_db: s.snr_db,
                before: sdr(&s.target, &s.mixture)?,
                after: sdr(&s.target, &est)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Separates every sample with the model and reports mean SDRs.
pub fn evaluate(
    samples: &[MixtureSample],
    ids: &[String],
    embedder: &SpeakerEmbedder,
    model: &AtssModel,
    cfg: &StftConfig,
    over: MaskOverride,
) -> Result<EvalReport> {
    evaluate_with(samples, ids, |s| separate_sample(s, embedder, model, cfg, over))
}

/// `model` as the `variant` ablation. Full and no-attention models share
/// every tensor except the attention projections, so a full model can be
/// evaluated with attention replaced by its value path.
pub fn ablate(model: &AtssModel, variant: Variant) -> Result<AtssModel> {
    let from = model.config.variant;
    if from == variant {
        return Ok(model.clone());
    }
    if !(from == Variant::Full && variant == Variant::NoAttention) {
        return Err(Error::invalid(format!("cannot evaluate a {from} model as {variant}")));
    }
    let config = ModelConfig {
        variant,
        ..model.config
    };
    let reference = AtssModel::new(config, 0)?;
    let mut params = crate::tensor::ParamStore::new();
    for name in reference.params.names() {
        let t = model
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        params.insert(name.clone(), t.clone())?;
    }
    AtssModel::from_params(config, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub training: TrainOutcome,
    pub report: EvalReport,
}

/// Trains a fresh `variant` model from `base` and evaluates its best
/// checkpoint on `eval_samples`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variant: Variant,
    base: &ModelConfig,
    model_seed: u64,
    train: &Corpus,
    val: &Corpus,
    ctx: &SeparatorContext<'_>,
    cfg: &TrainConfig,
    eval_samples: &[MixtureSample],
) -> Result<AblationOutcome> {
    let config = ModelConfig { variant, ..*base };
    let mut model = AtssModel::new(config, model_seed)?;
    let training = train_separator(train, val, ctx, &mut model, cfg, &TrainHooks::default(), &mut |_| {})?;
    let report = evaluate(
        eval_samples,
        &[],
        ctx.embedder,
        &training.best,
        &ctx.stft,
        MaskOverride::Model,
    )?;
    Ok(AblationOutcome { training, report })
}
