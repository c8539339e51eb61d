use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn pimt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimt"))
        .args(args)
        .env_remove("PIMT_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pimt(args);
    assert!(
        out.status.success(),
        "pimt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(data: &Path) -> Value {
    json!({
        "seed": 1,
        "encoder": {"n_layers": 1, "model_dim": 8, "state_dim": 4},
        "pretrain": {"epochs": 2, "batch_size": 16},
        "finetune": {"epochs": 2, "seeds": 1},
        "synth": {"subjects": 2, "sessions": 1, "minutes": 0.5, "channels": 2,
                  "task_subjects": 2, "task_sessions": 1, "task_windows_per_recording": 10},
        "analysis": {"saliency_windows": 4},
        "data": {"pretrain_manifest": data.join("pretrain_manifest.json"),
                 "task_manifest": data.join("task_manifest.json")}
    })
}

struct Fixture {
    root: PathBuf,
    config: PathBuf,
}

/// One synthesized dataset shared by every test in this binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let data = root.join("data");
        let config = root.join("cfg.json");
        fs::write(&config, tiny_config(&data).to_string()).unwrap();
        ok(&["synth", "--config", s(&config), "--out", s(&data)]);
        Fixture { root, config }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = fixture().root.join("runs").join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn listing(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect()
}

fn config_hash(dir: &Path) -> String {
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    v["config_hash"].as_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn synth_with_same_seed_reproduces_the_manifests() {
    let f = fixture();
    let again = scratch("synth-again");
    ok(&["synth", "--config", s(&f.config), "--out", s(&again)]);
    for name in ["pretrain_manifest.json", "task_manifest.json"] {
        assert_eq!(
            fs::read(f.root.join("data").join(name)).unwrap(),
            fs::read(again.join(name)).unwrap()
        );
    }
}

#[test]
fn invalid_task_band_fails_before_generation() {
    let dir = scratch("bad-band");
    fs::create_dir_all(&dir).unwrap();
    let mut cfg = tiny_config(&dir);
    cfg["synth"]["task"] = json!({"classes": [
        {"label": "a", "band": 2, "ratio": 4.0},
        {"label": "b", "band": 12, "ratio": 4.0}
    ]});
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out_dir = dir.join("out");
    let out = pimt(&["synth", "--config", s(&path), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = scratch("unknown-key");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("cfg.json");
    fs::write(&path, r#"{"encoder": {"layers": 3}}"#).unwrap();
    assert_eq!(pimt(&["default-config"]).status.code(), Some(0));
    assert_eq!(pimt(&["pretrain", "--config", s(&path)]).status.code(), Some(2));
}

#[test]
fn pretrain_without_manifest_reports_the_missing_file() {
    let dir = scratch("no-manifest");
    fs::create_dir_all(&dir).unwrap();
    let mut cfg = tiny_config(&dir.join("absent"));
    cfg["data"]["task_manifest"] = Value::Null;
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = pimt(&["pretrain", "--config", s(&path), "--out", s(&dir.join("out"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file not found"));
}

#[test]
fn tiny_pretrain_writes_exactly_its_artifacts() {
    let f = fixture();
    let dir = scratch("pretrain");
    let t = Instant::now();
    ok(&["pretrain", "--config", s(&f.config), "--out", s(&dir)]);
    assert!(t.elapsed() <= Duration::from_secs(300), "took {:?}", t.elapsed());
    let want: BTreeSet<String> = ["checkpoint.pimt", "curves.csv", "config.json"]
        .map(String::from)
        .into();
    assert_eq!(listing(&dir), want);
    let curves = fs::read_to_string(dir.join("curves.csv")).unwrap();
    assert_eq!(
        curves.lines().next().unwrap(),
        format!("# config_hash={}", config_hash(&dir))
    );
    // Header plus train and held-out rows for epochs 0..=2.
    assert_eq!(csv_rows(&dir.join("curves.csv")).len(), 7);
}

#[test]
fn finetune_from_checkpoint_then_eval_reproduces_the_metric() {
    let f = fixture();
    let pre = scratch("ft-pretrain");
    ok(&["pretrain", "--config", s(&f.config), "--out", s(&pre)]);
    let ft = scratch("ft");
    let ck = pre.join("checkpoint.pimt");
    ok(&[
        "finetune",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&ck),
        "--out",
        s(&ft),
    ]);
    let metrics = csv_rows(&ft.join("metrics.csv"));
    assert_eq!(metrics[0], "seed,macro_f1,n_samples");
    let stored: Vec<&str> = metrics[1].split(',').collect();

    let ev = scratch("eval");
    let head = ft.join(format!("head_seed{}.pimt", stored[0]));
    ok(&[
        "eval",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&head),
        "--out",
        s(&ev),
    ]);
    let evaluated = csv_rows(&ev.join("eval.csv"));
    assert_eq!(evaluated[1], metrics[1]);

    let sal = scratch("saliency");
    ok(&[
        "saliency",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&head),
        "--out",
        s(&sal),
    ]);
    let rows = csv_rows(&sal.join("saliency.csv"));
    assert_eq!(rows[0], "band,mass");
    let total: f64 = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(sal.join("saliency.svg").exists());

    // A checkpoint produced under another configuration is refused.
    let other = scratch("eval-other");
    let out = pimt(&[
        "eval",
        "--config",
        s(&f.config),
        "--seed",
        "9",
        "--checkpoint",
        s(&head),
        "--out",
        s(&other),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));
}

#[test]
fn three_seed_finetune_reports_mean_and_std() {
    let f = fixture();
    let dir = scratch("seeds3");
    ok(&["finetune", "--config", s(&f.config), "--seeds", "3", "--out", s(&dir)]);
    let per_seed = csv_rows(&dir.join("metrics.csv"));
    assert_eq!(per_seed.len(), 4);
    let summary = csv_rows(&dir.join("summary.csv"));
    assert_eq!(summary[0], "metric,seeds,mean,std");
    let cells: Vec<&str> = summary[1].split(',').collect();
    assert_eq!(cells[1], "3");
    let values: Vec<f64> = per_seed[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((cells[2].parse::<f64>().unwrap() - mean).abs() < 1e-12);
    assert!((cells[3].parse::<f64>().unwrap() - std).abs() < 1e-12);
}

#[test]
fn rerun_with_same_config_reproduces_outputs_bit_for_bit() {
    let f = fixture();
    let a = scratch("repro-a");
    let b = scratch("repro-b");
    ok(&["finetune", "--config", s(&f.config), "--out", s(&a)]);
    ok(&["finetune", "--config", s(&f.config), "--out", s(&b)]);
    for name in ["metrics.csv", "summary.csv", "metrics.json", "split.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    assert_eq!(config_hash(&a), config_hash(&b));
}

#[test]
fn band_ablation_has_one_row_per_preset() {
    let f = fixture();
    let dir = scratch("bands");
    ok(&["ablate-bands", "--config", s(&f.config), "--out", s(&dir)]);
    let rows = csv_rows(&dir.join("bands.csv"));
    assert_eq!(rows.len(), 5);
    let presets: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(presets, ["1-band", "2-band", "4-band", "12-band"]);
}

#[test]
fn output_root_variable_places_default_directories() {
    let f = fixture();
    let root = scratch("root");
    let out = Command::new(env!("CARGO_BIN_EXE_pimt"))
        .args(["finetune", "--config", s(&f.config)])
        .env("PIMT_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(listing(&root), BTreeSet::from(["finetune".to_string()]));
    assert!(root.join("finetune").join("metrics.csv").exists());
}
