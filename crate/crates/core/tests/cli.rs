//! Runs the `ssbver` binary end to end on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use ssbver::eval::read_npy;
use ssbver::trainer::TrainLog;
use tempfile::TempDir;

fn ssbver(args: &[&str]) -> Output {
    ssbver_env(args, &[])
}

fn ssbver_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssbver"));
    cmd.args(args).env_remove("SSBVER_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(dir: &Path, seed: u64) -> PathBuf {
    let spec = dir.join("spec.json");
    let body = json!({
        "n_identities": 6,
        "images_per_identity": 6,
        "image_size": [48, 48],
        "n_cameras": 3,
        "seed": seed,
        "query_per_identity": 1,
        "gallery_per_identity": 2
    });
    fs::write(&spec, body.to_string()).unwrap();
    let out = dir.join("data");
    let res = ssbver(&["make-synthetic", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

const SMALL: [&str; 16] = [
    "--set", "train.epochs=2",
    "--set", "train.augment.global_size=32",
    "--set", "train.augment.local_size=16",
    "--set", "train.augment.n_local=2",
    "--set", "train.ssl.projector.hidden_dim=32",
    "--set", "train.ssl.projector.out_dim=16",
    "--set", "train.encoder.stage_channels=[8,16]",
    "--set", "train.pk={\"p\":2,\"k\":3}",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let manifest = data.join("manifest.jsonl");
    let mut args = vec!["train", "--quiet", "--data", p(&manifest), "--out", p(out)];
    args.extend(SMALL);
    args.extend(extra);
    ssbver(&args)
}

struct Trained {
    _tmp: TempDir,
    data: PathBuf,
    out: PathBuf,
}

fn trained(extra: &[&str]) -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 3);
    let out = tmp.path().join("run");
    let res = train(&data, &out, extra);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    Trained { data, out, _tmp: tmp }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, db) = (make_data(a.path(), 11), make_data(b.path(), 11));
    let manifest = fs::read_to_string(da.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, fs::read_to_string(db.join("manifest.jsonl")).unwrap());
    assert_eq!(manifest.lines().count(), 36);
    for line in manifest.lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        let rel = entry["image_path"].as_str().unwrap();
        assert_eq!(fs::read(da.join(rel)).unwrap(), fs::read(db.join(rel)).unwrap());
    }
    assert!(da.join("config.json").is_file());
}

#[test]
fn invalid_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.json");
    fs::write(&spec, json!({"n_identities": 1}).to_string()).unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&ssbver(&["make-synthetic", "--spec", p(&spec), "--out", p(&out)])), 2);

    let missing = tmp.path().join("nope.jsonl");
    let res = ssbver(&["train", "--quiet", "--data", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&res), 4);

    let data = make_data(tmp.path(), 1);
    let manifest = data.join("manifest.jsonl");
    let res = ssbver(&["train", "--data", p(&manifest), "--out", p(&out), "--set", "train.lambda_s=-1"]);
    assert_eq!(code(&res), 2);
    assert_eq!(code(&ssbver(&["train", "--bogus"])), 2);
    assert_eq!(code(&ssbver(&["--help"])), 0);
}

#[test]
fn baseline_logs_no_self_distillation() {
    let run = trained(&["--baseline"]);
    let log = TrainLog::read_csv(run.out.join("train_log.csv")).unwrap();
    assert!(!log.records.is_empty());
    assert!(log.records.iter().all(|r| r.l_s == 0.0 && r.l_c > 0.0 && r.l_t > 0.0));
    for r in &log.records {
        assert!((r.l_total - (r.l_c + r.l_t)).abs() < 1e-12);
    }
    let cfg = read_json(&run.out.join("config.json"));
    assert_eq!(cfg["train"]["lambda_s"], json!(0.0));
    assert!(run.out.join("checkpoint.ckpt").is_file());
    assert!(run.out.join("checkpoints/epoch_0002.ckpt").is_file());
}

#[test]
fn full_objective_logs_self_distillation() {
    let run = trained(&[]);
    let log = TrainLog::read_csv(run.out.join("train_log.csv")).unwrap();
    assert!(log.records.iter().all(|r| r.l_s > 0.0));
    for r in &log.records {
        assert!((r.l_total - (r.l_c + r.l_t + r.l_s)).abs() < 1e-9);
    }
    let header = fs::read_to_string(run.out.join("train_log.csv")).unwrap();
    assert!(header.starts_with("iter,epoch,L_c,L_t,L_s,L_total,lr,tau_t,entropy_pt"));
}

#[test]
fn seed_variable_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 2);
    let manifest = data.join("manifest.jsonl");
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["train", "--quiet", "--baseline", "--data", p(&manifest), "--out", p(&out)];
        args.extend(SMALL);
        args.extend(["--set", "train.epochs=1", "--set", "train.seed=5"]);
        let res = ssbver_env(&args, &[("SSBVER_SEED", seed)]);
        assert_eq!(code(&res), 0);
        out
    };
    let (a, b, c) = (run("a", "42"), run("b", "42"), run("c", "43"));
    assert_eq!(read_json(&a.join("config.json"))["train"]["seed"], json!(42));
    let bytes = |d: &Path| fs::read(d.join("checkpoint.ckpt")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 4);
    let whole = tmp.path().join("whole");
    assert_eq!(code(&train(&data, &whole, &["--baseline"])), 0);
    let split = tmp.path().join("split");
    assert_eq!(code(&train(&data, &split, &["--baseline", "--set", "train.checkpoint_every=1", "--stop-after-epoch", "1"])), 0);
    let ckpt = split.join("checkpoints/epoch_0001.ckpt");
    let res = train(&data, &split, &["--baseline", "--set", "train.checkpoint_every=1", "--resume", p(&ckpt)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let read = |d: &Path| fs::read_to_string(d.join("train_log.csv")).unwrap();
    assert_eq!(read(&whole), read(&split));
}

#[test]
fn evaluate_writes_metrics_and_distances() {
    let run = trained(&["--baseline"]);
    let ckpt = run.out.join("checkpoint.ckpt");
    let manifest = run.data.join("manifest.jsonl");
    for protocol in ["none", "cross_camera"] {
        let out = run.out.join(format!("eval_{protocol}"));
        let res = ssbver(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&manifest), "--protocol", protocol, "--out", p(&out)]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        let m = read_json(&out.join("metrics.json"));
        let map = m["mAP"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&map));
        assert_eq!(m["protocol"], json!(protocol));
        assert_eq!(m["n_query"], json!(6));
        let d = read_json(&out.join("distances.json"));
        assert!(d["mu_pos"].as_f64().unwrap() >= 0.0 && d["mu_neg"].as_f64().unwrap() >= 0.0);
        assert!(out.join("distances.csv").is_file());
        assert_eq!(read_json(&out.join("config.json"))["eval"]["protocol"], json!(protocol));
    }
    let bad = run.out.join("eval_bad");
    let res = ssbver(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&manifest), "--protocol", "diagonal", "--out", p(&bad)]);
    assert_ne!(code(&res), 0);
}

#[test]
fn self_retrieval_ranks_the_copy_first() {
    let run = trained(&["--baseline"]);
    // Gallery holds an exact copy of every query image.
    let text = fs::read_to_string(run.data.join("manifest.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for line in text.lines() {
        let mut e: Value = serde_json::from_str(line).unwrap();
        if e["split"] == "query" {
            e["split"] = json!("gallery");
            lines.push(e.to_string());
        }
    }
    let manifest = run.data.join("self.jsonl");
    fs::write(&manifest, lines.join("\n") + "\n").unwrap();
    let out = run.out.join("self_eval");
    let ckpt = run.out.join("checkpoint.ckpt");
    let res = ssbver(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&manifest), "--protocol", "none", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["cmc"]["1"].as_f64(), Some(1.0));
}

#[test]
fn saliency_of_identical_images() {
    let run = trained(&["--baseline"]);
    let text = fs::read_to_string(run.data.join("manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let img = run.data.join(first["image_path"].as_str().unwrap());
    let out = run.out.join("sal");
    let ckpt = run.out.join("checkpoint.ckpt");
    let res = ssbver(&["saliency", "--checkpoint", p(&ckpt), "--query", p(&img), "--gallery", p(&img), "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let s = read_json(&out.join("saliency.json"));
    assert!((s["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    for name in ["query", "gallery"] {
        let (shape, data) = read_npy(out.join(format!("{name}_saliency.npy"))).unwrap();
        assert_eq!(shape, vec![32, 32]);
        assert!(data.iter().all(|v| v.is_finite() && *v >= 0.0));
        let (shape, _) = read_npy(out.join(format!("{name}_gradient.npy"))).unwrap();
        assert_eq!(shape, vec![3, 32, 32]);
        assert!(out.join(format!("{name}_saliency.png")).is_file());
    }
    assert!(out.join("config.json").is_file());
}

#[test]
fn profile_reports_every_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("prof");
    let res = ssbver(&["profile", "--arch", "tiny", "--image-size", "32", "--iters", "10", "--warmup", "2", "--out", p(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let r = read_json(&out.join("efficiency.json"));
    assert_eq!(r["params_millions"].as_f64(), Some(64672.0 / 1e6));
    assert!(r["ms_per_image"].as_f64().unwrap() > 0.0);
    assert!(r["peak_memory_mb"].as_f64().unwrap() > 0.0);
    assert_eq!(r["dims"], json!(64));
    assert_eq!(r["memory_source"], json!("allocator"));
    assert!(!r["hardware_descriptor"].as_str().unwrap().is_empty());
    assert!(out.join("config.json").is_file());

    let res = ssbver(&["profile", "--arch", "tiny", "--iters", "3", "--out", p(&out)]);
    assert_eq!(code(&res), 2);
}
