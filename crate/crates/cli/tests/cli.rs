use std::path::Path;
use std::process::{Command, Output};

fn hrseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrseg"))
        .args(args)
        .current_dir(dir)
        .env("HRS_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = hrseg(d, &["train", "--model", "nope", "--out", "t"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("error code=2 kind=config"));
    assert_eq!(code(&hrseg(d, &["eval", "--bogus"])), 2);
    assert_eq!(code(&hrseg(d, &["eval", "--ai", "3"])), 2);
    std::fs::write(d.join("c.json"), r#"{"epochs": 1, "colour": "red"}"#).unwrap();
    assert_eq!(code(&hrseg(d, &["train", "--config", "c.json"])), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = hrseg(d, &["train", "--dataset", "missing", "--out", "t"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    std::fs::write(d.join("bad.pgm"), b"P5\n4 4\n255\nab").unwrap();
    assert_eq!(code(&hrseg(d, &["gen", "--out", "data", "--count", "4", "--size", "64x64"])), 0);
    assert_eq!(code(&hrseg(d, &["train", "--dataset", "data", "--out", "t", "--epochs", "1"])), 0);
    let o = hrseg(d, &["infer", "--input", "bad.pgm", "--checkpoint", "t/checkpoint", "--out", "i"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_and_keeps_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&hrseg(d, &["gen", "--out", "data", "--count", "4", "--size", "64x64"])), 0);
    std::fs::write(d.join("c.json"), r#"{"max_lr": 1e12}"#).unwrap();
    let o = hrseg(d, &["train", "--config", "c.json", "--dataset", "data", "--out", "t", "--epochs", "3"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=numerical"));
    assert!(d.join("t/checkpoint/manifest.json").exists());
}

#[test]
fn artifacts_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&hrseg(d, &["gen", "--out", "data", "--count", "10", "--size", "64x64", "--seed", "4"])), 0);
    let o = hrseg(d, &["train", "--dataset", "data", "--out", "t", "--epochs", "1", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = hrseg(d, &["eval", "--dataset", "data", "--checkpoint", "t/checkpoint", "--out", "e", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    for file in ["data/provenance.json", "t/train_report.json", "e/metrics.json"] {
        let v = json(&d.join(file));
        let p = &v["provenance"];
        assert_eq!(p["tool"], "hrseg", "{file}");
        assert_eq!(p["seed"], 4, "{file}");
        assert_eq!(p["config_sha256"].as_str().unwrap().len(), 64, "{file}");
        assert!(v["config"].is_object() && !v["result"].is_null(), "{file}");
    }
    let resolved = json(&d.join("t/config.json"));
    assert_eq!(resolved["epochs"], 1);
    assert_eq!(resolved["seed"], 4);
    let history = std::fs::read_to_string(d.join("t/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
}

#[test]
fn infer_twice_writes_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&hrseg(d, &["gen", "--out", "data", "--count", "10", "--size", "64x64"])), 0);
    assert_eq!(code(&hrseg(d, &["train", "--dataset", "data", "--out", "t", "--epochs", "1"])), 0);
    let run = || {
        let o = hrseg(d, &["infer", "--input", "data", "--checkpoint", "t/checkpoint", "--out", "i"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = std::fs::read_dir(d.join("i/masks"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.clone(), std::fs::read(p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}
