//! Subcommands and their exit codes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use atss_core::corpus::{Corpus, NoiseSet};
use atss_core::model::{grad_check_suite, AtssModel, GradScope, Variant};
use atss_core::pipeline::{
    ablate, evaluate, read_samples, sample_seed, separate, simulate, train_separator, write_samples, EpochRecord,
    EvalReport, MaskOverride, MixMode, SeparatorContext, TrainHooks,
};
use atss_core::speaker::{train_embedder, EmbedderConfig, SpeakerEmbedder};
use atss_core::wav::{read_wav, write_wav};
use atss_core::Error;

use crate::checkpoint::{embedder_checkpoint, load_embedder, load_separator, save, separator_checkpoint};
use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "atss", version, about = "Target speaker separation with attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the speaker embedder on a `speaker<TAB>wav` manifest.
    TrainEmbedder {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the separator on mixtures simulated on the fly; writes the best
    /// checkpoint and a loss CSV beside it.
    TrainSeparator {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        val_manifest: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Noise clips, required when mix.mode = noisy.
        #[arg(long)]
        noise_manifest: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_nan_at_step: Option<usize>,
    },
    /// Extract the reference speaker from a mixture.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Debug: pass every time-frequency cell through unchanged.
        #[arg(long)]
        ones_mask: bool,
    },
    /// Score a stored mixture set (its index.json) and write a JSON report.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate the model as this variant (full or no_attention).
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Write mixtures, targets and references plus index.json.
    Simulate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        noise_manifest: Option<PathBuf>,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Supplies mix.crop_seconds and the SNR range.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on toy dimensions.
    Gradcheck {
        #[arg(long, default_value = "layers")]
        scope: String,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Why a command failed; each kind has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Args(String),
    Data(Error),
    Numeric(Error),
    GradCheck(usize),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Args(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::GradCheck(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Args(m) => write!(f, "{m}"),
            Failure::Data(e) | Failure::Numeric(e) => write!(f, "{e}"),
            Failure::GradCheck(n) => write!(f, "{n} gradient checks failed"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Args(m),
            Error::Config { .. } => Failure::Args(e.to_string()),
            Error::Numeric(_) => Failure::Numeric(e),
            _ => Failure::Data(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read_config(path: Option<&Path>) -> std::result::Result<Config, Failure> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Args(format!("{}: {e}", p.display())))?;
            Config::parse(&text).map_err(|e| Failure::Args(format!("{}: {e}", p.display())))
        }
    }
}

fn load_corpus(path: &Path, min_len: usize) -> std::result::Result<Corpus, Failure> {
    let (corpus, dropped) = Corpus::from_manifest(path, min_len)?;
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} utterances shorter than {min_len} samples",
            path.display()
        );
    }
    Ok(corpus)
}

fn write_json(path: &Path, value: &EvalReport) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(Error::Data(e.to_string())))?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

/// `<out>.csv` next to the checkpoint.
pub fn loss_csv_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

/// Checkpoint of the last finite state after a numeric failure.
pub fn partial_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::TrainEmbedder { manifest, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let corpus = load_corpus(&manifest, 0)?;
            let ec = EmbedderConfig {
                n_speakers: corpus.n_speakers(),
                ..cfg.embedder
            };
            if ec.n_speakers < 2 {
                return Err(Failure::Data(Error::Data(format!(
                    "{}: need at least 2 speakers, found {}",
                    manifest.display(),
                    ec.n_speakers
                ))));
            }
            let mut embedder = SpeakerEmbedder::new(ec, cfg.embedder_train.seed)?;
            let report = train_embedder(&corpus, &mut embedder, &cfg.embedder_train)?;
            save(&out, &embedder_checkpoint(&cfg, &embedder))?;
            println!(
                "embedder loss={:.4} accuracy={:.4}",
                report.final_loss(),
                report.final_accuracy()
            );
            Ok(())
        }
        Command::TrainSeparator {
            manifest,
            val_manifest,
            embedder,
            config,
            out,
            noise_manifest,
            inject_nan_at_step,
        } => {
            let cfg = read_config(config.as_deref())?;
            let crop = cfg.mix.crop_len(atss_core::dsp::DEFAULT_SAMPLE_RATE);
            let train = load_corpus(&manifest, crop)?;
            let val = load_corpus(&val_manifest, crop)?;
            let noise = noise_manifest.as_deref().map(NoiseSet::from_manifest).transpose()?;
            if cfg.mix.mode == MixMode::Noisy && noise.is_none() {
                return Err(Failure::Args("mix.mode = noisy needs --noise-manifest".into()));
            }
            let (_, emb) = load_embedder(&embedder)?;
            let ctx = SeparatorContext {
                embedder: &emb,
                stft: cfg.stft,
                mix: cfg.mix,
                noise: noise.as_ref(),
            };
            let mut model = AtssModel::new(cfg.model, cfg.train.seed)?;
            let hooks = TrainHooks {
                nan_at_step: inject_nan_at_step,
                ..TrainHooks::default()
            };
            let csv_path = loss_csv_path(&out);
            let mut csv = fs::File::create(&csv_path).map_err(Error::from)?;
            writeln!(csv, "epoch,train_loss,val_loss").map_err(Error::from)?;
            let mut csv_err = None;
            let mut on_epoch = |r: &EpochRecord| {
                println!(
                    "epoch {} train_loss={:.6} val_loss={:.6}",
                    r.epoch, r.train_loss, r.val_loss
                );
                if let Err(e) = writeln!(csv, "{},{},{}", r.epoch, r.train_loss, r.val_loss).and_then(|_| csv.flush()) {
                    csv_err.get_or_insert(e);
                }
            };
            let result = train_separator(&train, &val, &ctx, &mut model, &cfg.train, &hooks, &mut on_epoch);
            if let Some(e) = csv_err {
                return Err(Error::from(e).into());
            }
            match result {
                Ok(outcome) => {
                    save(&out, &separator_checkpoint(&cfg, &outcome.best)?)?;
                    println!(
                        "best epoch {} val_loss={:.6}{}",
                        outcome.best_epoch,
                        outcome.best_val_loss,
                        if outcome.stopped_early { " (stopped early)" } else { "" }
                    );
                    Ok(())
                }
                Err(e @ Error::Numeric(_)) => {
                    let partial = partial_path(&out);
                    save(&partial, &separator_checkpoint(&cfg, &model)?)?;
                    eprintln!("last finite state written to {}", partial.display());
                    Err(Failure::Numeric(e))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Separate {
            mixture,
            reference,
            embedder,
            model,
            out,
            ones_mask,
        } => {
            let (cfg, model) = load_separator(&model)?;
            let (_, emb) = load_embedder(&embedder)?;
            let mix = read_wav(&mixture)?;
            let reference = read_wav(&reference)?;
            let over = if ones_mask {
                MaskOverride::Ones
            } else {
                MaskOverride::Model
            };
            let est = separate(&mix, &reference, &emb, &model, &cfg.stft, over)?;
            let clipped = write_wav(&out, &est)?;
            if clipped > 0 {
                eprintln!("warning: {clipped} samples clipped to [-1, 1)");
            }
            Ok(())
        }
        Command::Evaluate {
            manifest,
            embedder,
            model,
            report,
            ablation,
        } => {
            let (cfg, model) = load_separator(&model)?;
            let (_, emb) = load_embedder(&embedder)?;
            let model = match ablation {
                Some(v) => ablate(&model, v.parse::<Variant>()?)?,
                None => model,
            };
            let (records, samples) = read_samples(&manifest)?;
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            let rep = evaluate(&samples, &ids, &emb, &model, &cfg.stft, MaskOverride::Model)?;
            write_json(&report, &rep)?;
            println!("{}", rep.summary_line());
            Ok(())
        }
        Command::Simulate {
            manifest,
            noise_manifest,
            mode,
            count,
            seed,
            out_dir,
            config,
        } => {
            let cfg = read_config(config.as_deref())?;
            let mode: MixMode = mode.parse()?;
            let spec = atss_core::pipeline::MixSpec { mode, ..cfg.mix };
            if count == 0 {
                return Err(Failure::Args("--count must be positive".into()));
            }
            let noise = noise_manifest.as_deref().map(NoiseSet::from_manifest).transpose()?;
            if mode == MixMode::Noisy && noise.is_none() {
                return Err(Failure::Args("--mode noisy needs --noise-manifest".into()));
            }
            let corpus = load_corpus(&manifest, spec.crop_len(atss_core::dsp::DEFAULT_SAMPLE_RATE))?;
            let samples = (0..count as u64)
                .map(|i| simulate(&corpus, noise.as_ref(), &spec, sample_seed(seed, i)))
                .collect::<atss_core::Result<Vec<_>>>()?;
            let index = write_samples(&out_dir, mode, &samples)?;
            println!("wrote {count} samples to {}", index.display());
            Ok(())
        }
        Command::Gradcheck { scope, inject_fault } => {
            let scope: GradScope = scope.parse()?;
            let cases = grad_check_suite(scope, inject_fault.then_some(1.1))?;
            let mut failed = 0;
            for c in &cases {
                let ok = c.passes();
                failed += !ok as usize;
                println!(
                    "{:<20} max_rel_err={:.3e} threshold={:.0e} coords={} skipped={} {}",
                    c.name,
                    c.report.max_rel_error,
                    c.threshold,
                    c.report.coordinates,
                    c.report.skipped_kinks,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                Err(Failure::GradCheck(failed))
            } else {
                Ok(())
            }
        }
    }
}
