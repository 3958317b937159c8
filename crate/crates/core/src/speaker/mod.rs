//! Speaker embedder: residual CNN over log-Mel features, mean and standard
//! deviation pooling, a linear embedding layer and a training-only classifier.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{energy_vad, log_mel_fbank, FbankConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::{he_normal, xavier_uniform, Bound, Conv2dSpec, Graph, NodeId, ParamStore, Tensor};

pub use train::{train_embedder, EmbedderTrainConfig, EmbedderTrainReport};

/// Frames kept by the energy VAD must reach this count, otherwise all frames
/// are used.
pub const MIN_FRAMES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedderConfig {
    /// Widths of the four residual stages.
    pub channels: [usize; 4],
    /// Embedding width F̈.
    pub embed_dim: usize,
    pub n_speakers: usize,
    pub fbank: FbankConfig,
    /// Frames more than this many dB below the loudest frame are dropped.
    pub vad_db: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            embed_dim: 256,
            n_speakers: 2,
            fbank: FbankConfig::default(),
            vad_db: 40.0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("embedder dimensions must be positive"));
        }
        if self.n_speakers < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 training speakers, got {}",
                self.n_speakers
            )));
        }
        Ok(())
    }
}

/// Fixed-length voice descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f32>);

impl SpeakerEmbedding {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `a·b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroSignal("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Output frames of one stride-2, 3x3, pad-1 convolution.
fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Feature-map shape `[C, T', M']` produced for a `T x M` input.
pub fn resnet_output_shape(cfg: &EmbedderConfig, frames: usize, n_mels: usize) -> [usize; 3] {
    let (mut t, mut m) = (frames, n_mels);
    for _ in 1..4 {
        t = halve(t);
        m = halve(m);
    }
    [cfg.channels[3], t, m]
}

fn conv_scale(g: &mut Graph, p: &Bound<'_>, x: NodeId, kernel: &str, scale: &str, stride: usize) -> Result<NodeId> {
    let y = g.conv2d(x, p.get(kernel)?, None, Conv2dSpec::strided(stride, stride))?;
    g.channel_scale(y, p.get(scale)?)
}

/// Stem conv and four stages of two basic residual blocks; stages 2-4 halve
/// both axes in their first block. Input `[1, T, M]`, output `[C4, T/8, M/8]`
/// (rounded up).
pub fn resnet_forward(g: &mut Graph, p: &Bound<'_>, x: NodeId) -> Result<NodeId> {
    let &[1, t, _] = g.shape(x) else {
        return Err(Error::shape(format!(
            "resnet input must be [1, T, M], got {:?}",
            g.shape(x)
        )));
    };
    if t < MIN_FRAMES {
        return Err(Error::TooShort {
            len: t,
            need: MIN_FRAMES,
        });
    }
    let y = conv_scale(g, p, x, "stem.conv.kernel", "stem.scale", 1)?;
    let mut h = g.relu(y);
    for s in 0..4 {
        for b in 0..2 {
            let pre = format!("stage{s}.block{b}");
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let y = conv_scale(
                g,
                p,
                h,
                &format!("{pre}.conv1.kernel"),
                &format!("{pre}.scale1"),
                stride,
            )?;
            let y = g.relu(y);
            let y = conv_scale(g, p, y, &format!("{pre}.conv2.kernel"), &format!("{pre}.scale2"), 1)?;
            let short = if p.get(&format!("{pre}.proj.kernel")).is_ok() {
                conv_scale(
                    g,
                    p,
                    h,
                    &format!("{pre}.proj.kernel"),
                    &format!("{pre}.proj.scale"),
                    stride,
                )?
            } else {
                h
            };
            let sum = g.add(y, short)?;
            h = g.relu(sum);
        }
    }
    Ok(h)
}

/// Embedding node `[F̈]` for a `[T, M]` feature tensor.
pub fn embedding_node(g: &mut Graph, p: &Bound<'_>, feats: &Tensor) -> Result<NodeId> {
    let &[t, m] = feats.shape() else {
        return Err(Error::shape(format!(
            "features must be [T, M], got {:?}",
            feats.shape()
        )));
    };
    let x = g.constant(feats.clone().reshape(&[1, t, m])?);
    let h = resnet_forward(g, p, x)?;
    let pooled = g.stat_pool(h)?;
    g.linear(pooled, p.get("embed.weight")?, Some(p.get("embed.bias")?))
}

/// Classifier logits `[n_speakers]` on top of an embedding node.
pub fn logits_node(g: &mut Graph, p: &Bound<'_>, emb: NodeId) -> Result<NodeId> {
    g.linear(emb, p.get("classifier.weight")?, Some(p.get("classifier.bias")?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedder {
    pub config: EmbedderConfig,
    pub params: ParamStore,
}

impl SpeakerEmbedder {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = config.channels;
        p.insert("stem.conv.kernel", he_normal(&[c[0], 1, 3, 3], 9, &mut rng))?;
        p.insert("stem.scale", Tensor::full(&[c[0]], 1.0))?;
        let mut cin = c[0];
        for (s, &cout) in c.iter().enumerate() {
            for b in 0..2 {
                let pre = format!("stage{s}.block{b}");
                let bin = if b == 0 { cin } else { cout };
                p.insert(
                    format!("{pre}.conv1.kernel"),
                    he_normal(&[cout, bin, 3, 3], bin * 9, &mut rng),
                )?;
                p.insert(format!("{pre}.scale1"), Tensor::full(&[cout], 1.0))?;
                p.insert(
                    format!("{pre}.conv2.kernel"),
                    he_normal(&[cout, cout, 3, 3], cout * 9, &mut rng),
                )?;
                p.insert(format!("{pre}.scale2"), Tensor::zeros(&[cout]))?;
                if b == 0 && (s > 0 || bin != cout) {
                    p.insert(
                        format!("{pre}.proj.kernel"),
                        he_normal(&[cout, bin, 1, 1], bin, &mut rng),
                    )?;
                    p.insert(format!("{pre}.proj.scale"), Tensor::full(&[cout], 1.0))?;
                }
            }
            cin = cout;
        }
        let pooled = 2 * c[3];
        p.insert(
            "embed.weight",
            xavier_uniform(&[pooled, config.embed_dim], pooled, config.embed_dim, &mut rng),
        )?;
        p.insert("embed.bias", Tensor::zeros(&[config.embed_dim]))?;
        p.insert(
            "classifier.weight",
            xavier_uniform(
                &[config.embed_dim, config.n_speakers],
                config.embed_dim,
                config.n_speakers,
                &mut rng,
            ),
        )?;
        p.insert("classifier.bias", Tensor::zeros(&[config.n_speakers]))?;
        Ok(Self { config, params: p })
    }

    /// Wraps loaded parameters after checking names and shapes. The
    /// classifier may be absent in inference-only checkpoints.
    pub fn from_params(config: EmbedderConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        let mut expected = 0;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => expected += 1,
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None if name.starts_with("classifier.") => {}
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected {
            return Err(Error::Checkpoint("embedder checkpoint has unexpected tensors".into()));
        }
        Ok(Self { config, params })
    }

    /// Same model with the classification head removed.
    pub fn without_classifier(&self) -> Self {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !n.starts_with("classifier.")) {
            params.insert(name, t.clone()).expect("names are unique");
        }
        Self {
            config: self.config,
            params,
        }
    }

    pub fn has_classifier(&self) -> bool {
        self.params.contains("classifier.weight")
    }

    /// Log-Mel frames kept by the VAD (all frames when fewer than
    /// [`MIN_FRAMES`] survive), with the per-band mean removed. `[T, M]`.
    pub fn features(&self, wave: &Waveform) -> Result<Tensor> {
        let fb = log_mel_fbank(wave, &self.config.fbank)?;
        let kept = energy_vad(&fb, self.config.vad_db);
        let fb = if kept.len() >= MIN_FRAMES { fb.select(&kept) } else { fb };
        if fb.frames() < MIN_FRAMES {
            return Err(Error::TooShort {
                len: fb.frames(),
                need: MIN_FRAMES,
            });
        }
        let fb = fb.mean_normalized();
        Tensor::from_f64(&[fb.frames(), fb.n_mels()], fb.data())
    }

    pub fn embed_features(&self, feats: &Tensor) -> Result<SpeakerEmbedding> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = embedding_node(&mut g, &p, feats)?;
        Ok(SpeakerEmbedding(g.value(e).data().to_vec()))
    }

    pub fn embed(&self, wave: &Waveform) -> Result<SpeakerEmbedding> {
        self.embed_features(&self.features(wave)?)
    }

    pub fn classify_features(&self, feats: &Tensor) -> Result<Vec<f32>> {
        if !self.has_classifier() {
            return Err(Error::invalid("embedder has no classification head"));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = embedding_node(&mut g, &p, feats)?;
        let l = logits_node(&mut g, &p, e)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn classify(&self, wave: &Waveform) -> Result<Vec<f32>> {
        self.classify_features(&self.features(wave)?)
    }
}
