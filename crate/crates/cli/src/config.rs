//! Flat `key = value` configuration with `#` comments.

use std::fmt::Write as _;
use std::str::FromStr;

use atss_core::dsp::StftConfig;
use atss_core::model::{AttentionAxis, ModelConfig, Variant};
use atss_core::pipeline::{MixMode, MixSpec, TrainConfig};
use atss_core::speaker::{EmbedderConfig, EmbedderTrainConfig};
use atss_core::{Error, Result};

/// Every setting the commands read. Defaults follow the reference training
/// setup; `model.freq_bins` follows the STFT and the embedder's speaker count
/// follows the training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mix: MixSpec,
    pub embedder: EmbedderConfig,
    pub embedder_train: EmbedderTrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        let stft = StftConfig::default();
        Self {
            stft,
            model: ModelConfig {
                freq_bins: stft.bins(),
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            mix: MixSpec::default(),
            embedder: EmbedderConfig::default(),
            embedder_train: EmbedderTrainConfig::default(),
        }
    }
}

/// Keys in the order [`Config::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "stft.frame_len",
    "stft.hop",
    "stft.fft_size",
    "model.n_blocks",
    "model.n_heads",
    "model.d_k",
    "model.embed_dim",
    "model.attention_axis",
    "model.variant",
    "train.lr",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.steps_per_epoch",
    "train.val_size",
    "train.seed",
    "mix.mode",
    "mix.crop_seconds",
    "mix.snr_min",
    "mix.snr_max",
    "embedder.channels",
    "embedder.vad_db",
    "embedder.epochs",
    "embedder.steps_per_epoch",
    "embedder.batch_size",
    "embedder.crop_frames",
    "embedder.lr",
];

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config {
        line,
        msg: format!("{key}: cannot parse {value:?}: {e}"),
    })
}

fn parse_channels(line: usize, value: &str) -> Result<[usize; 4]> {
    let parts = value
        .split(',')
        .map(|v| parse::<usize>(line, "embedder.channels", v.trim()))
        .collect::<Result<Vec<_>>>()?;
    parts.try_into().map_err(|p: Vec<usize>| Error::Config {
        line,
        msg: format!("embedder.channels needs 4 comma-separated widths, got {}", p.len()),
    })
}

impl Config {
    /// Parses `text` over the defaults. Unknown or repeated keys and
    /// malformed lines are rejected with their 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key = value, got {body:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {key:?}"),
                });
            };
            if seen.contains(&known) {
                return Err(Error::Config {
                    line,
                    msg: format!("{key} set twice"),
                });
            }
            seen.push(known);
            c.set(line, known, value)?;
        }
        c.model.freq_bins = c.stft.bins();
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "stft.frame_len" => self.stft.frame_len = parse(line, key, v)?,
            "stft.hop" => self.stft.hop = parse(line, key, v)?,
            "stft.fft_size" => self.stft.fft_size = parse(line, key, v)?,
            "model.n_blocks" => self.model.n_blocks = parse(line, key, v)?,
            "model.n_heads" => self.model.n_heads = parse(line, key, v)?,
            "model.d_k" => self.model.d_k = parse(line, key, v)?,
            "model.embed_dim" => {
                self.model.embed_dim = parse(line, key, v)?;
                self.embedder.embed_dim = self.model.embed_dim;
            }
            "model.attention_axis" => self.model.attention_axis = parse::<AttentionAxis>(line, key, v)?,
            "model.variant" => self.model.variant = parse::<Variant>(line, key, v)?,
            "train.lr" => self.train.lr = parse(line, key, v)?,
            "train.batch_size" => self.train.batch_size = parse(line, key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(line, key, v)?,
            "train.patience" => self.train.patience = parse(line, key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse(line, key, v)?,
            "train.val_size" => self.train.val_size = parse(line, key, v)?,
            "train.seed" => {
                self.train.seed = parse(line, key, v)?;
                self.embedder_train.seed = self.train.seed;
            }
            "mix.mode" => self.mix.mode = parse::<MixMode>(line, key, v)?,
            "mix.crop_seconds" => self.mix.crop_seconds = parse(line, key, v)?,
            "mix.snr_min" => self.mix.snr_min = parse(line, key, v)?,
            "mix.snr_max" => self.mix.snr_max = parse(line, key, v)?,
            "embedder.channels" => self.embedder.channels = parse_channels(line, v)?,
            "embedder.vad_db" => self.embedder.vad_db = parse(line, key, v)?,
            "embedder.epochs" => self.embedder_train.epochs = parse(line, key, v)?,
            "embedder.steps_per_epoch" => self.embedder_train.steps_per_epoch = parse(line, key, v)?,
            "embedder.batch_size" => self.embedder_train.batch_size = parse(line, key, v)?,
            "embedder.crop_frames" => self.embedder_train.crop_frames = parse(line, key, v)?,
            "embedder.lr" => self.embedder_train.lr = parse(line, key, v)?,
            _ => unreachable!("key list and setter agree"),
        }
        Ok(())
    }

    /// Checks every section; the embedder's speaker count is not checked
    /// here since it comes from the corpus.
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.mix.validate()?;
        EmbedderConfig {
            n_speakers: self.embedder.n_speakers.max(2),
            ..self.embedder
        }
        .validate()?;
        self.embedder_train.validate()
    }

    /// Canonical text with every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let c = self.embedder.channels;
        let values: Vec<String> = vec![
            self.stft.frame_len.to_string(),
            self.stft.hop.to_string(),
            self.stft.fft_size.to_string(),
            self.model.n_blocks.to_string(),
            self.model.n_heads.to_string(),
            self.model.d_k.to_string(),
            self.model.embed_dim.to_string(),
            self.model.attention_axis.to_string(),
            self.model.variant.to_string(),
            self.train.lr.to_string(),
            self.train.batch_size.to_string(),
            self.train.max_epochs.to_string(),
            self.train.patience.to_string(),
            self.train.steps_per_epoch.to_string(),
            self.train.val_size.to_string(),
            self.train.seed.to_string(),
            self.mix.mode.to_string(),
            self.mix.crop_seconds.to_string(),
            self.mix.snr_min.to_string(),
            self.mix.snr_max.to_string(),
            format!("{},{},{},{}", c[0], c[1], c[2], c[3]),
            self.embedder.vad_db.to_string(),
            self.embedder_train.epochs.to_string(),
            self.embedder_train.steps_per_epoch.to_string(),
            self.embedder_train.batch_size.to_string(),
            self.embedder_train.crop_frames.to_string(),
            self.embedder_train.lr.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}
