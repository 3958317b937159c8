//! Binary checkpoints: `ATSS` magic, u32 version, length-prefixed config
//! text, then named f32 tensors. All integers little-endian.

use std::fs;
use std::path::Path;

use atss_core::model::AtssModel;
use atss_core::speaker::{EmbedderConfig, SpeakerEmbedder};
use atss_core::tensor::{ParamStore, Tensor};
use atss_core::{Error, Result};

use crate::config::Config;

pub const MAGIC: &[u8; 4] = b"ATSS";
pub const VERSION: u32 = 1;

/// Config snapshot plus parameters, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("{what} does not fit the checkpoint format"))
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = ck.config.as_bytes();
    out.extend_from_slice(&u32::try_from(text.len()).map_err(|_| too_big("config"))?.to_le_bytes());
    out.extend_from_slice(text);
    out.extend_from_slice(
        &u32::try_from(ck.params.len())
            .map_err(|_| too_big("tensor count"))?
            .to_le_bytes(),
    );
    for (name, t) in ck.params.iter() {
        let n = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.ndim()).map_err(|_| too_big("tensor rank"))?);
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("tensor extent"))?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an ATSS checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let n = r.u32("config length")? as usize;
    let config = r.text(n, "config")?;
    let count = r.u32("tensor count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u16("name length")? as usize;
        let name = r.text(n, "tensor name")?;
        let ndim = r.u8("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let data = r
            .take(len, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate tensor {name}")))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { config, params })
}

pub fn save(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn snapshot(text: &str) -> Result<Config> {
    Config::parse(text).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
}

/// `cfg` with the model section replaced by `model`'s own configuration.
pub fn separator_checkpoint(cfg: &Config, model: &AtssModel) -> Result<Checkpoint> {
    if model.config.freq_bins != cfg.stft.bins() {
        return Err(Error::InvalidArgument(format!(
            "model has {} frequency bins, STFT gives {}",
            model.config.freq_bins,
            cfg.stft.bins()
        )));
    }
    let mut c = cfg.clone();
    c.model = model.config;
    c.embedder.embed_dim = model.config.embed_dim;
    Ok(Checkpoint {
        config: c.to_text(),
        params: model.params.clone(),
    })
}

pub fn load_separator(path: impl AsRef<Path>) -> Result<(Config, AtssModel)> {
    let ck = load(path)?;
    let cfg = snapshot(&ck.config)?;
    let model = AtssModel::from_params(cfg.model, ck.params)?;
    Ok((cfg, model))
}

pub fn embedder_checkpoint(cfg: &Config, embedder: &SpeakerEmbedder) -> Checkpoint {
    let mut c = cfg.clone();
    c.embedder = embedder.config;
    c.model.embed_dim = embedder.config.embed_dim;
    Checkpoint {
        config: c.to_text(),
        params: embedder.params.clone(),
    }
}

/// Loads an embedder; the speaker count comes from the classifier shape,
/// and a checkpoint without a classifier is accepted for inference.
pub fn load_embedder(path: impl AsRef<Path>) -> Result<(Config, SpeakerEmbedder)> {
    let ck = load(path)?;
    let cfg = snapshot(&ck.config)?;
    let n_speakers = match ck.params.get("classifier.bias") {
        Some(b) => b.len(),
        None => 2,
    };
    let config = EmbedderConfig {
        n_speakers,
        ..cfg.embedder
    };
    Ok((cfg, SpeakerEmbedder::from_params(config, ck.params)?))
}
