#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atss_core::corpus::{synthetic_corpus, synthetic_noise, SynthSpec};

/// Small enough that every command finishes in about a second.
pub const TINY_CONFIG: &str = "\
# tiny dims for command tests
stft.frame_len = 256
stft.hop = 128
stft.fft_size = 256
model.n_blocks = 1
model.n_heads = 2
model.d_k = 4
model.embed_dim = 8
train.lr = 0.001
train.batch_size = 1
train.max_epochs = 2
train.patience = 2
train.steps_per_epoch = 2
train.val_size = 2
train.seed = 0
mix.crop_seconds = 0.25
embedder.channels = 4,4,8,8
embedder.epochs = 1
embedder.steps_per_epoch = 2
embedder.batch_size = 2
embedder.crop_frames = 32
";

pub fn atss(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_atss"));
    for a in args {
        cmd.arg(a);
    }
    cmd.env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Files every command of a tiny run reads or writes.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub noise: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.conf");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let corpus = synthetic_corpus(&SynthSpec {
            n_speakers: 3,
            utterances_per_speaker: 3,
            seconds: 1.0,
            ..SynthSpec::default()
        });
        let manifest = corpus.write(dir.path().join("corpus")).unwrap();
        let noise = synthetic_noise(2, 1.0, 16_000, 5)
            .write(dir.path().join("noise"))
            .unwrap();
        Self {
            dir,
            config,
            manifest,
            noise,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn train_embedder(&self, out: &Path) -> Output {
        atss(&[
            &"train-embedder",
            &"--manifest",
            &self.manifest,
            &"--config",
            &self.config,
            &"--out",
            &out,
        ])
    }

    pub fn train_separator(&self, embedder: &Path, out: &Path, extra: &[&str]) -> Output {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![
            &"train-separator",
            &"--manifest",
            &self.manifest,
            &"--val-manifest",
            &self.manifest,
            &"--embedder",
            &embedder,
            &"--config",
            &self.config,
            &"--out",
            &out,
        ];
        for e in extra {
            args.push(e);
        }
        atss(&args)
    }

    pub fn simulate(&self, out_dir: &Path, mode: &str, count: usize, seed: u64) -> Output {
        let (count, seed) = (count.to_string(), seed.to_string());
        atss(&[
            &"simulate",
            &"--manifest",
            &self.manifest,
            &"--noise-manifest",
            &self.noise,
            &"--mode",
            &mode,
            &"--count",
            &count,
            &"--seed",
            &seed,
            &"--out-dir",
            &out_dir,
            &"--config",
            &self.config,
        ])
    }

    /// Trained embedder and separator checkpoints.
    pub fn models(&self) -> (PathBuf, PathBuf) {
        let (e, m) = (self.path("emb.ckpt"), self.path("sep.ckpt"));
        assert!(self.train_embedder(&e).status.success());
        let o = self.train_separator(&e, &m, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        (e, m)
    }
}
