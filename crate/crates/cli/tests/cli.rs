use std::path::Path;
use std::process::{Command, Output};

fn certiqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_certiqa")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = certiqa(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Tiny dataset, metric and denoisers in `dir`.
fn fixture(dir: &Path) {
    let out = dir.to_str().unwrap();
    ok(&["gen-data", "--out", out, "--count", "40", "--seed", "5", "--set", "height=16", "--set", "width=16"]);
    ok(&["train-metric", "--out", out, "--seed", "5", "--set", "epochs=2"]);
    ok(&["train-denoiser", "--mode", "mse", "--out", out, "--seed", "5", "--set", "epochs=1", "--base", "4"]);
    ok(&["train-denoiser", "--mode", "composite", "--out", out, "--seed", "5", "--set", "epochs=1", "--set", "batch=4"]);
}

#[test]
fn certify_emits_ordered_records() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = dir.path().to_str().unwrap();
    for defense in ["ms", "dms", "dms_iqa"] {
        ok(&["certify", "--out", out, "--n", "200", "--images", "5", "--set", "split=all", "--set", &format!("defense={defense}")]);
        let text = std::fs::read_to_string(dir.path().join("certify.json")).unwrap();
        let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        assert_eq!(records.len(), 5);
        for r in &records {
            let (l, m, u) = (r["lower"].as_f64().unwrap(), r["median"].as_f64().unwrap(), r["upper"].as_f64().unwrap());
            assert!(l <= m && m <= u, "{defense}: {l} {m} {u}");
            assert_eq!(r["n"], 200);
        }
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest_certify.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "certify");
    assert_eq!(manifest["config"]["n"], "200");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["artifacts"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "--out", d.path().to_str().unwrap(), "--count", "20", "--seed", "9"]);
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("dataset.ctds")).unwrap();
    assert_eq!(read(&a), read(&b));
    ok(&["gen-data", "--out", b.path().to_str().unwrap(), "--count", "20", "--seed", "10"]);
    assert_ne!(read(&a), read(&b));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&certiqa(&["--help"])), 0);
    assert_eq!(code(&certiqa(&["no-such-command"])), 1);
    assert_eq!(code(&certiqa(&["train-denoiser"])), 1);

    let o = certiqa(&["certify", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let o = certiqa(&["gen-data", "--out", out, "--set", "colour=blue"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));

    let o = certiqa(&["gen-data", "--out", out, "--set", "width=30"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));

    let o = certiqa(&["certify", "--out", out, "--sigma", "-1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));

    // Infeasible order statistic.
    let o = certiqa(&["certify", "--out", out, "--n", "10"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible"));

    // Corrupt model file.
    ok(&["gen-data", "--out", out, "--count", "20"]);
    std::fs::write(dir.path().join("metric.ctiq"), b"not a model").unwrap();
    let o = certiqa(&["certify", "--out", out, "--n", "100"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn flags_override_set_override_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "count = 12\nseed = 1\nmos_noise = 0.5\n").unwrap();
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--set", "seed=2", "--set", "count=14", "--count", "16", "--out", out]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest_gen_data.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["count"], "16");
    assert_eq!(m["config"]["seed"], "2");
    assert_eq!(m["config"]["mos_noise"], "0.5");
    assert_eq!(m["seed"], "2");
}
