//! On-disk mixture sets: three WAVs per sample plus an `index.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MixMode, MixtureSample};
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav};

pub const INDEX_FILE: &str = "index.json";

/// Metadata of one stored sample; file names are relative to the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub seed: u64,
    pub target_speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub mixture: String,
    pub target: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    mode: String,
    count: usize,
    samples: Vec<SampleRecord>,
}

/// Writes `mixture_%05d.wav`, `target_%05d.wav`, `reference_%05d.wav` for
/// each sample and the index. Returns the index path.
pub fn write_samples(dir: impl AsRef<Path>, mode: MixMode, samples: &[MixtureSample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let names = [
            format!("mixture_{id}.wav"),
            format!("target_{id}.wav"),
            format!("reference_{id}.wav"),
        ];
        for (name, wave) in names.iter().zip([&s.mixture, &s.target, &s.reference]) {
            let clipped = write_wav(dir.join(name), wave)?;
            if clipped > 0 {
                log::warn!("{name}: {clipped} samples clipped");
            }
        }
        let [mixture, target, reference] = names;
        records.push(SampleRecord {
            id,
            seed: s.seed,
            target_speaker: s.target_speaker.clone(),
            interferer: s.interferer.clone(),
            snr_db: s.snr_db,
            mixture,
            target,
            reference,
        });
    }
    let index = Index {
        mode: mode.to_string(),
        count: records.len(),
        samples: records,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text + "\n")?;
    Ok(path)
}

/// Loads a stored set. The interference is recovered as mixture minus
/// target, so it carries the WAV quantization of both.
pub fn read_samples(index: impl AsRef<Path>) -> Result<(Vec<SampleRecord>, Vec<MixtureSample>)> {
    let path = index.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let samples = index
        .samples
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mixture = read_wav(dir.join(&r.mixture))?;
            let target = read_wav(dir.join(&r.target))?;
            let reference = read_wav(dir.join(&r.reference))?;
            if mixture.len() != target.len() {
                return Err(Error::Data(format!(
                    "sample {}: mixture and target lengths differ",
                    r.id
                )));
            }
            let interference = mixture.add(&target.scaled(-1.0))?;
            Ok(MixtureSample {
                mixture,
                target,
                reference,
                interference,
                target_speaker: r.target_speaker.clone(),
                interferer: r.interferer.clone(),
                snr_db: r.snr_db,
                seed: r.seed,
                reference_key: (usize::MAX, i),
                target_key: (usize::MAX, i),
                target_offset: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index.samples, samples))
}
