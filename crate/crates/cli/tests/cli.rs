use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_active-testing")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn batch(count: usize, min: usize, max: usize, seed: u64) -> Value {
    json!({ "count": count, "width": 64, "height": 64, "min_targets": min, "max_targets": max, "seed": seed })
}

/// Scenes, a model trained on them and a held-out test set, built once.
struct Fixture {
    _root: TempDir,
    train: PathBuf,
    test: PathBuf,
    multi: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = TempDir::new().unwrap();
        let r = root.path();
        let spec = write(r, "train.json", &json!({ "random": [batch(30, 1, 1, 1), batch(6, 0, 0, 2)] }));
        let train = r.join("train");
        ok(&["synth", "--spec", s(&spec), "--out", s(&train)]);
        let spec = write(r, "test.json", &json!({ "random": [batch(20, 1, 1, 99)], "scenes": [
            { "width": 64, "height": 64, "targets": [], "seed": 4 }
        ]}));
        let test = r.join("test");
        ok(&["synth", "--spec", s(&spec), "--out", s(&test)]);
        let spec = write(r, "multi.json", &json!({ "scenes": [{ "width": 64, "height": 64, "seed": 5,
            "targets": [{ "x": 12, "y": 12, "size": 8.0 }, { "x": 48, "y": 16, "size": 10.0 }, { "x": 30, "y": 48, "size": 9.0 }] }] }));
        let multi = r.join("multi");
        ok(&["synth", "--spec", s(&spec), "--out", s(&multi)]);
        let model = r.join("model.json");
        ok(&["train", "--scenes", s(&train), "--out", s(&model), "--seed", "3", "--samples", "2000"]);
        Fixture { _root: root, train, test, multi, model }
    })
}

fn search(image: &Path, extra: &[&str]) -> Value {
    let f = fixture();
    let mut args = vec!["search", s(image), "--model", s(&f.model)];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(&args).stdout).unwrap()
}

#[test]
fn synth_writes_one_image_per_scene_and_is_reproducible() {
    let f = fixture();
    let pgms = |d: &Path| fs::read_dir(d).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms(&f.train), 36);
    let truth: Value = serde_json::from_str(&fs::read_to_string(f.train.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["scenes"].as_array().unwrap().len(), 36);

    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &json!({ "random": [batch(4, 0, 3, 8)] }));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--spec", s(&spec), "--out", s(&a)]);
    ok(&["synth", "--spec", s(&spec), "--out", s(&b)]);
    for name in ["scene_000.pgm", "scene_003.pgm", "truth.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    ok(&["synth", "--spec", s(&spec), "--out", s(&c), "--seed", "11"]);
    assert_ne!(fs::read(a.join("truth.json")).unwrap(), fs::read(c.join("truth.json")).unwrap());
}

#[test]
fn overlapping_targets_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &json!({ "scenes": [{ "width": 64, "height": 64, "seed": 1,
        "targets": [{ "x": 20, "y": 20, "size": 10.0 }, { "x": 24, "y": 22, "size": 10.0 }] }] }));
    let out = bin(&["synth", "--spec", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_needs_truth() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let again = tmp.path().join("model.json");
    ok(&["train", "--scenes", s(&f.train), "--out", s(&again), "--seed", "3", "--samples", "2000"]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&f.model).unwrap());
    let model: Value = serde_json::from_slice(&fs::read(&again).unwrap()).unwrap();
    let (d, m) = (model["D"].as_u64().unwrap(), model["M"].as_u64().unwrap());
    assert_eq!(model["models"].as_array().unwrap().len() as u64, 25 * d * (m + 1));
    let manifest: Value = serde_json::from_slice(&fs::read(tmp.path().join("model.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model_sha256"].as_str().unwrap().len(), 64);

    let out = bin(&["train", "--scenes", s(&f.train), "--truth", s(&tmp.path().join("none.json")), "--out", s(&again)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_finds_planted_targets() {
    let f = fixture();
    let truth: Value = serde_json::from_str(&fs::read_to_string(f.test.join("truth.json")).unwrap()).unwrap();
    let scenes = truth["scenes"].as_array().unwrap();
    let detected = scenes[1..].iter().filter(|e| search(&f.test.join(e["image"].as_str().unwrap()), &[])["outcome"] == "detected").count();
    assert!(detected >= 18, "{detected}/20 detected");

    let tmp = TempDir::new().unwrap();
    let trace = tmp.path().join("trace.txt");
    let blank = search(&f.test.join("scene_000.pgm"), &["--trace", s(&trace), "--out", s(tmp.path())]);
    assert_eq!(blank["outcome"], "no_target");
    let lines = fs::read_to_string(&trace).unwrap().lines().count() as u64;
    assert_eq!(lines, blank["steps"].as_u64().unwrap());
    assert!(tmp.path().join("result.json").exists() && tmp.path().join("manifest.json").exists());

    let multi = search(&f.multi.join("scene_000.pgm"), &["--multi"]);
    assert_eq!(multi["detections"].as_array().unwrap().len(), 3, "{multi}");
}

#[test]
fn mismatched_model_is_a_validation_error() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &json!({ "scenes": [{ "width": 200, "height": 100, "targets": [], "seed": 1 }] }));
    ok(&["synth", "--spec", s(&spec), "--out", s(tmp.path())]);
    let out = bin(&["search", s(&tmp.path().join("scene_000.pgm")), "--model", s(&f.model)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write(tmp.path(), "cfg.json", &json!({ "tau": 2.0 }));
    let out = bin(&["search", s(&f.test.join("scene_000.pgm")), "--model", s(&f.model), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["search"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_rows_and_manifest_replay_are_byte_identical() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["bench", "--scenes", s(&f.test), "--model", s(&f.model), "--out", s(&a), "--seed", "21"]);
    let csv = fs::read_to_string(a.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 21);
    assert_eq!(csv.lines().next().unwrap(), "scene_id,method,detected,correct,oracle_evals,soft_evals,wall_ms");
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert!(summary["active_testing"]["mean_oracle_evals"].as_f64().unwrap() < summary["sliding_window"]["mean_oracle_evals"].as_f64().unwrap());

    let manifest = a.join("manifest.json");
    ok(&["bench", "--scenes", s(&f.test), "--model", s(&f.model), "--out", s(&b), "--manifest", s(&manifest)]);
    assert_eq!(fs::read(a.join("bench.csv")).unwrap(), fs::read(b.join("bench.csv")).unwrap());

    let mut m: Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    m["model_sha256"] = json!("0".repeat(64));
    let bad = write(tmp.path(), "bad.json", &m);
    let out = bin(&["bench", "--scenes", s(&f.test), "--model", s(&f.model), "--manifest", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}
