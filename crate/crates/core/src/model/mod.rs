//! Mask estimator: stacked attention blocks over `[magnitude ‖ embedding]`
//! feature maps followed by a transform block that emits sigmoid masks.

mod checks;
mod layers;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::tensor::{he_normal, normal, xavier_uniform, Bound, Graph, NodeId, ParamStore, Tensor};

pub use checks::{grad_check_suite, toy_config, GradCase, GradScope, GRAD_STEP, LAYER_THRESHOLD, MODEL_THRESHOLD};
pub use layers::{
    attention_block, concat_inputs, dcnn_extract, feed_forward, multi_head_attention, scaled_dot_attention,
    transform_block, Attention, Qkv, DCNN_DILATIONS, LN_EPS,
};
pub use loss::{apply_mask, l2_loss, masked_l2_node, pit_loss, pit_loss_node, Mask, Permutation};

/// Sequence axis of the attention score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Time,
    Freq,
}

impl FromStr for AttentionAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Self::Time),
            "freq" => Ok(Self::Freq),
            _ => Err(Error::invalid(format!(
                "attention axis must be time or freq, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for AttentionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Time => "time",
            Self::Freq => "freq",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Embedding-conditioned model with attention.
    Full,
    /// Attention replaced by its value projection.
    NoAttention,
    /// No embedding input; two masks trained with a permutation-invariant loss.
    Pit,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_attention" => Ok(Self::NoAttention),
            "pit" => Ok(Self::Pit),
            _ => Err(Error::invalid(format!(
                "variant must be full, no_attention or pit, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoAttention => "no_attention",
            Self::Pit => "pit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_k: usize,
    /// Spectrogram bins F̄.
    pub freq_bins: usize,
    /// Speaker embedding width F̈.
    pub embed_dim: usize,
    pub attention_axis: AttentionAxis,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            n_heads: 2,
            d_k: 64,
            freq_bins: 257,
            embed_dim: 256,
            attention_axis: AttentionAxis::Time,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_heads == 0 || self.d_k == 0 || self.freq_bins == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.uses_embedding() && self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        if self.d_k % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_k = {} is not divisible by {} heads",
                self.d_k, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn uses_embedding(&self) -> bool {
        self.variant != Variant::Pit
    }

    pub fn has_attention(&self) -> bool {
        self.variant != Variant::NoAttention
    }

    /// Feature width F of the attention blocks.
    pub fn feat_dim(&self) -> usize {
        self.freq_bins + if self.uses_embedding() { self.embed_dim } else { 0 }
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.feat_dim()
    }

    pub fn n_outputs(&self) -> usize {
        if self.variant == Variant::Pit {
            2
        } else {
            1
        }
    }
}

/// Separator parameters and their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AtssModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl AtssModel {
    /// Fresh parameters. The attention output kernel and the second
    /// feed-forward layer start at zero, so every block begins as the identity
    /// on its residual stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (dk, f, fh, fb) = (config.d_k, config.feat_dim(), config.ffn_hidden(), config.freq_bins);
        for i in 0..config.n_blocks {
            let cin = if i == 0 { 1 } else { dk };
            let pre = format!("block{i}");
            p.insert(format!("{pre}.ln1.gamma"), Tensor::full(&[f], 1.0))?;
            p.insert(format!("{pre}.ln1.beta"), Tensor::zeros(&[f]))?;
            for j in 1..=6 {
                let (c, k) = (if j == 1 { cin } else { dk }, if j == 6 { 1 } else { 5 });
                let kernel = if j == 6 {
                    normal(&[dk, c, k, k], (1.0 / (c * k * k) as f64).sqrt(), &mut rng)
                } else {
                    he_normal(&[dk, c, k, k], c * k * k, &mut rng)
                };
                p.insert(format!("{pre}.dcnn.conv{j}.kernel"), kernel)?;
                p.insert(format!("{pre}.dcnn.conv{j}.bias"), Tensor::zeros(&[dk]))?;
            }
            let proj = |rng: &mut ChaCha8Rng| xavier_uniform(&[dk, dk, 1, 1], dk, dk, rng);
            if config.has_attention() {
                p.insert(format!("{pre}.attn.wq"), proj(&mut rng))?;
                p.insert(format!("{pre}.attn.wk"), proj(&mut rng))?;
            }
            p.insert(format!("{pre}.attn.wv"), proj(&mut rng))?;
            if config.has_attention() {
                p.insert(format!("{pre}.attn.wo"), Tensor::zeros(&[dk, dk, 3, 3]))?;
            }
            p.insert(format!("{pre}.ln2.gamma"), Tensor::full(&[f], 1.0))?;
            p.insert(format!("{pre}.ln2.beta"), Tensor::zeros(&[f]))?;
            p.insert(format!("{pre}.ffn.w1"), he_normal(&[f, fh], f, &mut rng))?;
            p.insert(format!("{pre}.ffn.b1"), Tensor::zeros(&[fh]))?;
            p.insert(format!("{pre}.ffn.w2"), Tensor::zeros(&[fh, f]))?;
            p.insert(format!("{pre}.ffn.b2"), Tensor::zeros(&[f]))?;
        }
        p.insert("transform.dense.weight", xavier_uniform(&[f, fb], f, fb, &mut rng))?;
        p.insert("transform.dense.bias", Tensor::zeros(&[fb]))?;
        let n = config.n_outputs();
        p.insert(
            "transform.conv.kernel",
            xavier_uniform(&[n, dk, 3, 3], dk * 9, n * 9, &mut rng),
        )?;
        p.insert("transform.conv.bias", Tensor::zeros(&[n]))?;
        Ok(Self { config, params: p })
    }

    /// Wraps loaded parameters after checking every expected tensor exists
    /// with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Masks for one magnitude spectrogram, without recording gradients.
    pub fn predict(&self, mag: &MagnitudeSpectrogram, emb: Option<&[f32]>) -> Result<Vec<Mask>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mag_t = magnitude_tensor(mag);
        let masks = atss_forward(&mut g, &p, &self.config, &mag_t, emb)?;
        masks
            .into_iter()
            .map(|m| Mask::new(mag.frames(), mag.bins(), g.value(m).data().to_vec()))
            .collect()
    }
}

/// `[T, F̄]` tensor view of a magnitude spectrogram.
pub fn magnitude_tensor(mag: &MagnitudeSpectrogram) -> Tensor {
    Tensor::from_fn(&[mag.frames(), mag.bins()], |i| mag.data()[i] as f32)
}

/// Full forward pass: input maps, attention blocks, transform block. Returns
/// one `[T, F̄]` mask node per output.
pub fn atss_forward(
    g: &mut Graph,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    mag: &Tensor,
    emb: Option<&[f32]>,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let &[t, fb] = mag.shape() else {
        return Err(Error::shape(format!("magnitude must be [T, F], got {:?}", mag.shape())));
    };
    if fb != cfg.freq_bins {
        return Err(Error::shape(format!(
            "magnitude has {fb} bins, model expects {}",
            cfg.freq_bins
        )));
    }
    let r = match (cfg.uses_embedding(), emb) {
        (true, Some(e)) => concat_inputs(mag, e)?,
        (true, None) => return Err(Error::invalid("this model needs a speaker embedding")),
        (false, Some(_)) => return Err(Error::invalid("this model takes no speaker embedding")),
        (false, None) => mag.clone(),
    };
    let f = r.shape()[1];
    let mut x = g.constant(r.reshape(&[1, t, f])?);
    for i in 0..cfg.n_blocks {
        x = attention_block(g, p, i, x, cfg)?;
    }
    transform_block(g, p, x, cfg)
}
