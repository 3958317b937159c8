mod common;

use std::fs;

use atss_cli::checkpoint::{load, load_embedder, load_separator};
use atss_core::wav::read_wav;
use common::{atss, stderr, stdout, Fixture};

#[test]
fn simulate_writes_thirty_wavs_and_index() {
    let fx = Fixture::new();
    let out = fx.path("sim");
    let o = fx.simulate(&out, "two_speaker", 10, 3);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".wav")).count(), 30);
    assert!(names.contains(&"index.json".to_string()));
    for kind in ["mixture", "target", "reference"] {
        assert!(names.contains(&format!("{kind}_00009.wav")));
    }
}

#[test]
fn simulate_is_byte_identical_and_noisy_snr_in_range() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a"), fx.path("b"));
    assert!(fx.simulate(&a, "noisy", 6, 9).status.success());
    assert!(fx.simulate(&b, "noisy", 6, 9).status.success());
    for e in fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let index: serde_json::Value = serde_json::from_slice(&fs::read(a.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["mode"], "noisy");
    for s in index["samples"].as_array().unwrap() {
        let snr = s["snr_db"].as_f64().unwrap();
        assert!((5.0..=20.0).contains(&snr), "{snr}");
    }
}

#[test]
fn data_and_argument_errors_have_distinct_codes() {
    let fx = Fixture::new();
    let missing = fx.path("nowhere.tsv");
    let o = atss(&[&"train-embedder", &"--manifest", &missing, &"--out", &fx.path("e.ckpt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.tsv"), "{}", stderr(&o));

    let bad = fx.path("bad.conf");
    fs::write(&bad, "train.lr = 1e-3\nmodel.depth = 2\n").unwrap();
    let o = atss(&[
        &"train-embedder",
        &"--manifest",
        &fx.manifest,
        &"--config",
        &bad,
        &"--out",
        &fx.path("e.ckpt"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    assert_eq!(atss(&[&"simulate", &"--count", &"x"]).status.code(), Some(1));
    let o = fx.simulate(&fx.path("s"), "three_speaker", 1, 0);
    assert_eq!(o.status.code(), Some(1));

    // One speaker cannot form a two-speaker mixture.
    let solo = fx.path("corpus/solo.tsv");
    fs::write(
        &solo,
        fs::read_to_string(&fx.manifest)
            .unwrap()
            .lines()
            .take(3)
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    let o = atss(&[
        &"simulate",
        &"--manifest",
        &solo,
        &"--mode",
        &"two_speaker",
        &"--count",
        &"2",
        &"--seed",
        &"0",
        &"--out-dir",
        &fx.path("s2"),
        &"--config",
        &fx.config,
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn embedder_checkpoint_matches_and_reruns_identically() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a.ckpt"), fx.path("b.ckpt"));
    let o = fx.train_embedder(&a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("embedder loss="));
    assert!(fx.train_embedder(&b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (_, e) = load_embedder(&a).unwrap();
    assert_eq!(e.config.n_speakers, 3);
    assert_eq!(e.config.embed_dim, 8);
    assert_eq!(load(&a).unwrap().params, e.params);
}

#[test]
fn separator_training_writes_csv_and_best_checkpoint() {
    let fx = Fixture::new();
    let (e, m) = fx.models();
    let csv = fs::read_to_string(fx.path("sep.ckpt.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert_eq!(lines.len(), 3);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
        assert!(cols[2].parse::<f64>().unwrap().is_finite());
    }
    let (cfg, model) = load_separator(&m).unwrap();
    assert_eq!(model.config.freq_bins, 129);
    assert_eq!(cfg.stft.hop, 128);

    // Same seed, same bytes.
    let m2 = fx.path("sep2.ckpt");
    assert!(fx.train_separator(&e, &m2, &[]).status.success());
    assert_eq!(fs::read(&m).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(
        fs::read(fx.path("sep.ckpt.csv")).unwrap(),
        fs::read(fx.path("sep2.ckpt.csv")).unwrap()
    );
}

#[test]
fn injected_nan_exits_3_with_partial_dump() {
    let fx = Fixture::new();
    let e = fx.path("emb.ckpt");
    assert!(fx.train_embedder(&e).status.success());
    let m = fx.path("sep.ckpt");
    let o = fx.train_separator(&e, &m, &["--inject-nan-at-step", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step 3"), "{}", stderr(&o));
    assert!(!m.exists());
    assert!(load_separator(fx.path("sep.ckpt.partial")).is_ok());
    // Epoch 1 (steps 0 and 1) completed before the failure.
    let csv = fs::read_to_string(fx.path("sep.ckpt.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn separate_keeps_length_and_is_deterministic() {
    let fx = Fixture::new();
    let (e, m) = fx.models();
    let sim = fx.path("sim");
    assert!(fx.simulate(&sim, "two_speaker", 1, 1).status.success());
    let mix = sim.join("mixture_00000.wav");
    let reference = sim.join("reference_00000.wav");
    let run = |out: &std::path::Path, ones: bool| {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![
            &"separate",
            &"--mixture",
            &mix,
            &"--reference",
            &reference,
            &"--embedder",
            &e,
            &"--model",
            &m,
            &"--out",
            &out,
        ];
        if ones {
            args.push(&"--ones-mask");
        }
        let o = atss(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (a, b, ones) = (fx.path("a.wav"), fx.path("b.wav"), fx.path("ones.wav"));
    run(&a, false);
    run(&b, false);
    run(&ones, true);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let input = read_wav(&mix).unwrap();
    assert_eq!(read_wav(&a).unwrap().len(), input.len());
    let back = read_wav(&ones).unwrap();
    let lsb = 1.0 / 32768.0;
    for (x, y) in input.samples().iter().zip(back.samples()) {
        assert!((x - y).abs() <= lsb + 1e-12, "{x} vs {y}");
    }

    let junk = fx.path("junk.wav");
    fs::write(&junk, b"not a wav").unwrap();
    let o = atss(&[
        &"separate",
        &"--mixture",
        &junk,
        &"--reference",
        &reference,
        &"--embedder",
        &e,
        &"--model",
        &m,
        &"--out",
        &a,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = atss(&[
        &"separate",
        &"--mixture",
        &mix,
        &"--reference",
        &reference,
        &"--embedder",
        &e,
        &"--model",
        &junk,
        &"--out",
        &a,
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_report_and_summary_line() {
    let fx = Fixture::new();
    let (e, m) = fx.models();
    let sim = fx.path("sim");
    assert!(fx.simulate(&sim, "two_speaker", 4, 2).status.success());
    let index = sim.join("index.json");
    let eval = |report: &std::path::Path, ablation: Option<&str>| {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![
            &"evaluate",
            &"--manifest",
            &index,
            &"--embedder",
            &e,
            &"--model",
            &m,
            &"--report",
            &report,
        ];
        let a;
        if let Some(v) = ablation {
            a = v.to_string();
            args.push(&"--ablation");
            args.push(&a);
        }
        atss(&args)
    };
    let r = fx.path("r.json");
    let o = eval(&r, None);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let re = |s: &str| {
        let parts: Vec<&str> = s.trim().split(' ').collect();
        parts.len() == 4
            && parts[0] == "SDR"
            && ["before=", "after=", "improved="]
                .iter()
                .zip(&parts[1..])
                .all(|(k, p)| p.starts_with(k) && p[k.len()..].split('.').nth(1).map(|d| d.len()) == Some(2))
    };
    assert!(re(&line), "{line}");
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&r).unwrap()).unwrap();
    assert_eq!(rep["n"], 4);
    let (before, after, imp) = (
        rep["sdr_before_mean"].as_f64().unwrap(),
        rep["sdr_after_mean"].as_f64().unwrap(),
        rep["sdr_improved_mean"].as_f64().unwrap(),
    );
    assert!((imp - (after - before)).abs() < 1e-9);
    assert_eq!(rep["samples"][3]["id"], "00003");

    let r2 = fx.path("r2.json");
    assert!(eval(&r2, None).status.success());
    assert_eq!(fs::read(&r).unwrap(), fs::read(&r2).unwrap());

    let ra = fx.path("ra.json");
    let o = eval(&ra, Some("no_attention"));
    assert!(o.status.success(), "{}", stderr(&o));
    let abl: serde_json::Value = serde_json::from_slice(&fs::read(&ra).unwrap()).unwrap();
    assert_eq!(abl["sdr_before_mean"], rep["sdr_before_mean"]);
    assert_eq!(eval(&ra, Some("pit")).status.code(), Some(1));

    fs::write(&index, r#"{"mode":"two_speaker","count":0,"samples":[]}"#).unwrap();
    assert_eq!(eval(&r, None).status.code(), Some(2));
}

#[test]
fn gradcheck_scopes_and_fault() {
    let o = atss(&[&"gradcheck", &"--scope", &"layers"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for op in [
        "linear",
        "conv2d",
        "softmax",
        "layer_norm",
        "stat_pool",
        "relu",
        "sigmoid",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(op) && l.ends_with("ok")),
            "{op}: {out}"
        );
    }
    let o = atss(&[&"gradcheck", &"--scope", &"layers", &"--inject-fault"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(atss(&[&"gradcheck", &"--scope", &"everything"]).status.code(), Some(1));
}
