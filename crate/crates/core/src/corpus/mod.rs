//! Speaker corpora and noise sets, loaded from manifests or synthesized.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav};

pub use synth::{synthetic_corpus, synthetic_noise, SynthSpec, Voice};

#[derive(Debug, Clone, PartialEq)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<Waveform>,
}

/// Utterances grouped by speaker, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    speakers: Vec<Speaker>,
}

impl Corpus {
    pub fn new(speakers: Vec<Speaker>) -> Result<Self> {
        if let Some(s) = speakers.iter().find(|s| s.utterances.is_empty()) {
            return Err(Error::Data(format!("speaker {} has no utterances", s.id)));
        }
        Ok(Self { speakers })
    }

    pub fn speakers(&self) -> &[Speaker] {
        &self.speakers
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers.iter().map(|s| s.utterances.len()).sum()
    }

    /// Speakers `range` only.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let s = self.speakers.get(range.clone()).ok_or_else(|| {
            Error::Data(format!(
                "corpus has {} speakers, asked for {range:?}",
                self.speakers.len()
            ))
        })?;
        Self::new(s.to_vec())
    }

    /// Reads a `speaker_id<TAB>wav_path` manifest; relative paths resolve
    /// against the manifest's directory. Utterances shorter than `min_len`
    /// samples are dropped; the number dropped is returned alongside.
    pub fn from_manifest(path: impl AsRef<Path>, min_len: usize) -> Result<(Self, usize)> {
        let path = path.as_ref();
        let mut speakers: Vec<Speaker> = Vec::new();
        let mut dropped = 0;
        for (line_no, entry) in manifest_lines(path)? {
            let (id, wav) = entry.split_once('\t').ok_or_else(|| {
                Error::Data(format!(
                    "{}:{line_no}: expected speaker_id<TAB>wav_path",
                    path.display()
                ))
            })?;
            let wave = read_wav(resolve(path, wav))?;
            if wave.len() < min_len {
                dropped += 1;
                continue;
            }
            match speakers.iter_mut().find(|s| s.id == id) {
                Some(s) => s.utterances.push(wave),
                None => speakers.push(Speaker {
                    id: id.to_string(),
                    utterances: vec![wave],
                }),
            }
        }
        if speakers.is_empty() {
            return Err(Error::Data(format!("{}: no usable utterances", path.display())));
        }
        Ok((Self::new(speakers)?, dropped))
    }

    /// Writes every utterance as a WAV under `dir` plus `manifest.tsv`, and
    /// returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for s in &self.speakers {
            for (i, u) in s.utterances.iter().enumerate() {
                let name = format!("{}_{i:03}.wav", s.id);
                write_wav(dir.join(&name), u)?;
                manifest.push_str(&format!("{}\t{name}\n", s.id));
            }
        }
        let path = dir.join("manifest.tsv");
        fs::write(&path, manifest)?;
        Ok(path)
    }
}

/// Noise recordings used for noisy mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSet {
    clips: Vec<Waveform>,
}

impl NoiseSet {
    pub fn new(clips: Vec<Waveform>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Data("noise set is empty".into()));
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[Waveform] {
        &self.clips
    }

    /// One WAV path per line; a `label<TAB>path` line uses the path.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let clips = manifest_lines(path)?
            .into_iter()
            .map(|(_, entry)| {
                let wav = entry.rsplit('\t').next().unwrap_or(&entry);
                read_wav(resolve(path, wav))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, c) in self.clips.iter().enumerate() {
            let name = format!("noise_{i:03}.wav");
            write_wav(dir.join(&name), c)?;
            manifest.push_str(&name);
            manifest.push('\n');
        }
        let path = dir.join("noise.tsv");
        fs::write(&path, manifest)?;
        Ok(path)
    }
}

fn manifest_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}
