//! The `amflow` binary: subcommands, files written and exit codes.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use amflow::config::RunConfig;
use amflow::model::Model;
use amflow::rng::seeded;
use amflow::run::{CHECKPOINT, CONFIG_ECHO, MANIFEST, METRICS};
use amflow::synth::{direction_spec, render_clip, save_clip, ClipSpec, SynthConfig};
use amflow::train::save_checkpoint;
use sha2::{Digest, Sha256};

fn amflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amflow")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_digest(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let hash = hex::encode(Sha256::digest(fs::read(e.path()).unwrap()));
            (e.file_name().to_string_lossy().into_owned(), hash)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_clips_and_manifest_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = amflow(&["synth", "--kind", "direction", "--n", "25", "--seed", "4", "--out", path(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let clips = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "amfc"));
    assert_eq!(clips.count(), 100);
    let manifest = fs::read_to_string(a.join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    for label in 0..4 {
        assert_eq!(manifest.lines().filter(|l| l.ends_with(&format!(",{label}"))).count(), 25);
    }
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn synth_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amflow(&["synth", "--kind", "direction", "--n", "0", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = amflow(&["synth", "--kind", "appearance", "--n", "1", "--out", path(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = amflow(&["synth", "--kind", "sideways", "--n", "1", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_metrics_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# short run\nepochs = 2\nflow = aligned\nblocks = \"0,3\"\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = amflow(&["train", "--config", path(&cfg), "--out", path(&out_dir), "seed=5", "tpm=tcn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = RunConfig::load(&out_dir.join(CONFIG_ECHO)).unwrap();
    assert_eq!(echo.get("flow"), "aligned");
    assert_eq!(echo.get("tpm"), "tcn");
    assert_eq!(echo.get("seed"), "5");
    assert_eq!(echo.get("blocks"), "0,3");
    let metrics = fs::read_to_string(out_dir.join(METRICS)).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["split"], "train");
    assert_eq!(lines[3]["epoch"], 2);
    assert!(out_dir.join(CHECKPOINT).exists());

    let eval = amflow(&["eval", "--checkpoint", path(&out_dir.join(CHECKPOINT))]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let stdout = String::from_utf8_lossy(&eval.stdout);
    let val: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    // the last epoch's validation metrics are those of the saved weights
    assert_eq!(val["top1"], lines[3]["top1"]);
}

#[test]
fn config_errors_name_the_key_or_file() {
    let out = amflow(&["train", "colour=red"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = amflow(&["params", "tpm=gru"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tpm"));
    let out = amflow(&["params", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.cfg"));
}

#[test]
fn nan_training_aborts_with_numeric_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = amflow(&["train", "--out", path(tmp.path()), "epochs=1", "lr=1e308", "beta1=0", "beta2=0", "eps=1e-300"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed") && err.contains("epoch"), "{err}");
}

#[test]
fn gradcheck_model_scope_passes() {
    let out = amflow(&["gradcheck", "--scope", "model", "--seed", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("model ")).count(), 3);
    assert!(!text.contains("FAIL"));
}

#[test]
fn params_shows_placement_reduction() {
    let trainable = |args: &[&str]| -> usize {
        let mut all = vec!["params"];
        all.extend_from_slice(args);
        let out = amflow(&all);
        let text = String::from_utf8_lossy(&out.stdout).into_owned();
        let line = text.lines().find(|l| l.starts_with("trainable")).unwrap().to_string();
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[1], cols[2], "formula and enumeration disagree");
        cols[1].parse().unwrap()
    };
    assert!(trainable(&["blocks=0,3"]) < trainable(&[]));
    assert!(trainable(&["flow=off"]) < trainable(&["flow=aligned"]));
}

#[test]
fn help_lists_every_flag() {
    let out = amflow(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--out", "KEY=VALUE"] {
        assert!(text.contains(flag), "{flag}");
    }
    let out = amflow(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "pretrain", "train", "eval", "gradcheck", "viz-flow", "params"] {
        assert!(text.contains(sub), "{sub}");
    }
    for (key, _, _) in amflow::config::KEYS {
        assert!(text.contains(key), "{key}");
    }
    assert_eq!(out.status.code(), Some(0));
}

/// Saves an untrained default model with its config beside it.
fn checkpoint(dir: &Path) -> std::path::PathBuf {
    let run = RunConfig::default();
    let model = Model::new(run.model_config().unwrap(), 0).unwrap();
    let ckpt = dir.join(CHECKPOINT);
    save_checkpoint(&ckpt, &model).unwrap();
    fs::write(dir.join(CONFIG_ECHO), run.echo()).unwrap();
    ckpt
}

fn read_ppm(path: &Path) -> (usize, Vec<[u8; 3]>) {
    let bytes = fs::read(path).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let px: Vec<[u8; 3]> = bytes[header.len()..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    (32, px)
}

#[test]
fn viz_flow_of_static_clip_is_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(tmp.path());
    let synth = SynthConfig::default();
    let spec = ClipSpec {
        velocity: (0, 0),
        noise: 0.0,
        ..direction_spec(&synth, 0, &mut seeded(1))
    };
    let clip_path = tmp.path().join("static.amfc");
    save_clip(&clip_path, &render_clip(&spec, 2).unwrap().0).unwrap();
    let out_dir = tmp.path().join("viz");
    let out = amflow(&["viz-flow", "--clip", path(&clip_path), "--checkpoint", path(&ckpt), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for block in 0..4 {
        let (side, px) = read_ppm(&out_dir.join(format!("block_{block}.ppm")));
        assert_eq!(px.len(), side * side);
        assert!(px.iter().all(|p| *p == px[0]), "block {block} not uniform");
    }
}

#[test]
fn viz_flow_highlights_moving_patches() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(tmp.path());
    let synth = SynthConfig::default();
    let mut inside = 0usize;
    let mut total = 0usize;
    for seed in 0..5u64 {
        let spec = direction_spec(&synth, seed as usize % 4, &mut seeded(10 + seed));
        let (clip, mask) = render_clip(&spec, seed).unwrap();
        let moving: BTreeSet<usize> = mask.pairs.iter().flatten().copied().collect();
        let clip_path = tmp.path().join(format!("clip{seed}.amfc"));
        save_clip(&clip_path, &clip).unwrap();
        let out_dir = tmp.path().join(format!("viz{seed}"));
        let out = amflow(&["viz-flow", "--clip", path(&clip_path), "--checkpoint", path(&ckpt), "--out", path(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for block in 0..4 {
            let (side, px) = read_ppm(&out_dir.join(format!("block_{block}.ppm")));
            // saliency: distance from the image's median colour
            let median: Vec<f64> = (0..3)
                .map(|c| {
                    let mut v: Vec<u8> = px.iter().map(|p| p[c]).collect();
                    v.sort_unstable();
                    v[v.len() / 2] as f64
                })
                .collect();
            let dist: Vec<f64> = px
                .iter()
                .map(|p| (0..3).map(|c| (p[c] as f64 - median[c]).powi(2)).sum::<f64>())
                .collect();
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            for &i in &order[..dist.len() / 10] {
                let patch = (i / side / synth.patch_px) * (side / synth.patch_px) + (i % side) / synth.patch_px;
                inside += usize::from(moving.contains(&patch));
                total += 1;
            }
        }
    }
    let share = inside as f64 / total as f64;
    assert!(share >= 0.6, "only {share:.2} of top-decile pixels fall on moving patches");
}

#[test]
fn viz_flow_without_checkpoint_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let clip_path = tmp.path().join("c.amfc");
    let spec = direction_spec(&SynthConfig::default(), 0, &mut seeded(0));
    save_clip(&clip_path, &render_clip(&spec, 0).unwrap().0).unwrap();
    let out = amflow(&[
        "viz-flow",
        "--clip",
        path(&clip_path),
        "--checkpoint",
        path(&tmp.path().join("missing.amfw")),
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
