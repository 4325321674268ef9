use std::path::Path;
use std::process::{Command, Output};

fn swep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swep"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SWEP_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("output")).expect("json line")
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--config", "missing.json"],
        &["train", "--ablation", "no_such_variant"],
        &["eval", "--checkpoint", "x.ckpt"],
        &["report", "--dir", "."],
    ] {
        let out = swep(args, dir.path());
        assert_eq!(
            out.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(swep(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn bad_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for body in [r#"{"train": {"epochs": 0}}"#, r#"{"unknown": 1}"#, "not json"] {
        std::fs::write(dir.path().join("c.json"), body).unwrap();
        let out = swep(&["train", "--config", "c.json"], dir.path());
        assert_eq!(out.status.code(), Some(1), "{body}");
    }
}

#[test]
fn synth_train_eval_analyze_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = swep(&["synth-data", "--out", "data", "--n-examples", "24"], p);
    assert!(out.status.success());
    assert_eq!(json(&out)["n_examples"], 24);
    for f in ["train.json", "vocab.json", "spec.json"] {
        assert!(p.join("data").join(f).is_file(), "{f}");
    }

    std::fs::write(
        p.join("c.json"),
        r#"{"data": {"kind": "squad", "train": "data/train.json", "vocab": "data/vocab.json"}, "train": {"batch_size": 8}}"#,
    )
    .unwrap();
    let out = swep(
        &[
            "train",
            "--config",
            "c.json",
            "--epochs",
            "2",
            "--ablation",
            "no_kl",
            "--seed",
            "4",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["steps"], 6);
    let run = p.join("runs");
    let stamped: Vec<_> = std::fs::read_dir(&run).unwrap().collect();
    assert_eq!(stamped.len(), 1);
    let run = stamped[0].as_ref().unwrap().path();
    for f in ["config.json", "vocab.json", "metrics.jsonl", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 4);
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["train"]["ablation"], "no_kl");

    let ckpt = run.join("last.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = swep(
        &[
            "eval",
            "--checkpoint",
            ckpt,
            "--data",
            "data/train.json",
            "--vocab",
            "data/vocab.json",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["n_examples"], 24);
    for k in ["em", "f1"] {
        let v = r[k].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{k} {v}");
    }

    let out = swep(&["synth-data", "--out", "other", "--vocab-size", "20"], p);
    assert!(out.status.success());
    let out = swep(
        &[
            "eval",
            "--checkpoint",
            ckpt,
            "--data",
            "data/train.json",
            "--vocab",
            "other/vocab.json",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(1), "vocabulary mismatch must be rejected");

    let out = swep(
        &[
            "analyze",
            "--checkpoint",
            ckpt,
            "--data",
            "data/train.json",
            "--vocab",
            "data/vocab.json",
            "--out",
            "an",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = swep(&["report", "--dir", "an"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "report.json",
        "ratios.csv",
        "intensity.csv",
        "buckets.csv",
        "report.md",
        "ratios.svg",
        "intensity.html",
    ] {
        assert!(p.join("an").join(f).is_file(), "{f}");
    }
    let md = std::fs::read_to_string(p.join("an/report.md")).unwrap();
    assert!(md.contains("| swep |"));
}

#[test]
fn run_dir_env_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_swep"))
        .args(["train", "--epochs", "1"])
        .current_dir(dir.path())
        .env("SWEP_RUN_DIR", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.path().join("elsewhere")).unwrap().count(), 1);
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = swep(
        &[
            "train",
            "--epochs",
            "1",
            "--seed",
            "9",
            "--ablation",
            "fixed_mu",
            "--run-dir",
            "a",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = swep(&["train", "--config", "a/config.json", "--run-dir", "b"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = |d: &str| std::fs::read(p.join(d).join("metrics.jsonl")).unwrap();
    assert_eq!(log("a"), log("b"));
}
