use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use refquery::config::RunConfig;
use refquery::data::{list_clips, load_clip, read_prediction};
use refquery::selfcheck::{tiny_model_config, tiny_spec};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refquery"))
        .args(args)
        .env("REFQUERY_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny configuration file for fast end-to-end runs.
fn tiny_config(dir: &Path, frames: usize) -> PathBuf {
    let mut cfg = RunConfig {
        model: tiny_model_config(),
        ..RunConfig::default()
    };
    cfg.train.iterations = 3;
    cfg.train.learning_rate = 1e-3;
    cfg.synthetic.clips = 2;
    cfg.synthetic.spec = tiny_spec(11);
    cfg.synthetic.spec.frames = frames;
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synthetic_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&bin(&["gen-synthetic", "--out", s(d), "--clips", "5", "--synthetic.spec.seed=1"]));
    }
    let manifests = list_clips(&a).unwrap();
    assert_eq!(manifests.len(), 5);
    for m in &manifests {
        load_clip(m).unwrap().validate().unwrap();
    }
    assert!(files(&a) == files(&b), "generated bytes differ");
}

#[test]
fn zero_clips_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["gen-synthetic", "--out", s(tmp.path()), "--clips", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("synthetic.clips"));
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&bin(&["gen-synthetic", "--config", s(&cfg), "--out", s(&data)]));
    ok(&bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--log-every", "1"]));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,L_v,L_f,L_sim,L_train");
    assert_eq!(lines.len(), 4);

    let (p1, p2) = (tmp.path().join("p1"), tmp.path().join("p2"));
    for p in [&p1, &p2] {
        ok(&bin(&["infer", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(p)]));
    }
    assert!(files(&p1) == files(&p2), "inference is not deterministic");
    for m in list_clips(&data).unwrap() {
        let clip = load_clip(&m).unwrap();
        let pred = read_prediction(&p1.join(format!("{}.json", clip.clip_id))).unwrap();
        let masks = pred.masks().unwrap();
        assert_eq!(masks.len(), clip.frames);
        assert!(masks.iter().all(|m| m.height() == clip.mask_height && m.width() == clip.mask_width));
    }

    let report = tmp.path().join("report");
    let table = ok(&bin(&["eval", "--pred", s(&p1), "--data", s(&data), "--report", s(&report)]));
    assert!(table.contains("J&F") && table.contains("mean"), "{table}");
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("clip_id,J&F,J,F\n"));
    assert_eq!(metrics.lines().count(), 1 + 2 + 1);
}

#[test]
fn resume_continues_the_same_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let data = tmp.path().join("data");
    ok(&bin(&["gen-synthetic", "--config", s(&cfg), "--out", s(&data)]));
    let (whole, half) = (tmp.path().join("whole"), tmp.path().join("half"));
    ok(&bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&whole), "--train.iterations=4"]));
    ok(&bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&half), "--train.iterations=2"]));
    let first = half.join("checkpoint.bin");
    let rest = tmp.path().join("rest");
    ok(&bin(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&rest),
        "--resume", s(&first), "--train.iterations=4",
    ]));
    assert_eq!(fs::read(whole.join("loss.csv")).unwrap(), fs::read(rest.join("loss.csv")).unwrap());
    assert!(fs::read(whole.join("checkpoint.bin")).unwrap() == fs::read(rest.join("checkpoint.bin")).unwrap());

    let out = bin(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&rest),
        "--resume", s(&first), "--train.iterations=4", "--train.learning_rate=0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.learning_rate"), "{}", stderr(&out));
}

#[test]
fn single_frame_clips_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1);
    let (data, run, pred) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("pred"));
    ok(&bin(&["gen-synthetic", "--config", s(&cfg), "--out", s(&data)]));
    ok(&bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    ok(&bin(&[
        "infer", "--config", s(&cfg), "--checkpoint", s(&run.join("checkpoint.bin")),
        "--data", s(&data), "--out", s(&pred),
    ]));
    for (_, bytes) in files(&pred) {
        let p: refquery::data::PredictionFile = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(p.masks().unwrap().len(), 1);
    }
}

#[test]
fn default_config_trains_on_generated_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&bin(&["gen-synthetic", "--out", s(&data), "--clips", "2"]));
    ok(&bin(&["train", "--data", s(&data), "--out", s(&run), "--train.iterations=1"]));
    assert!(run.join("checkpoint.bin").is_file() && run.join("loss.csv").is_file());
}

#[test]
fn negative_similarity_weight_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--data", s(tmp.path()), "--out", s(tmp.path()), "--loss.lambda_sim=-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lambda_sim"), "{}", stderr(&out));
}

#[test]
fn mismatched_checkpoint_names_the_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 2);
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&bin(&["gen-synthetic", "--config", s(&cfg), "--out", s(&data)]));
    ok(&bin(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--train.iterations=1"]));
    let out = bin(&[
        "infer", "--config", s(&cfg), "--checkpoint", s(&run.join("checkpoint.bin")),
        "--data", s(&data), "--out", s(&tmp.path().join("p")), "--model.frame_decoder.layers=3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("frame_decoder.layers.2"), "{err}");
}

#[test]
fn selfcheck_passes_and_reports_gradient_errors() {
    let out = bin(&["selfcheck"]);
    let text = ok(&out);
    assert!(text.contains("gelu") && text.contains("hungarian") && text.contains("end-to-end"), "{text}");
}

#[test]
fn corrupted_adjoint_fails_selfcheck_naming_the_op() {
    let out = bin(&["selfcheck", "--corrupt", "softmax"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("softmax"), "{}", stderr(&out));
}
