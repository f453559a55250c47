use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qvsumm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qvsumm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qvsumm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Bundle {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    manifest: std::path::PathBuf,
    config: std::path::PathBuf,
}

fn bundle() -> Bundle {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--videos", "10", "--feature-dim", "16", "--seed", "4"]);
    let config = root.join("run.json");
    fs::write(
        &config,
        r#"{"model": {"embed_dim": 8}, "train": {"epochs": 3, "adam": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}"#,
    )
    .unwrap();
    Bundle {
        _dir: dir,
        manifest: data.join("manifest.json"),
        root,
        config,
    }
}

#[test]
fn pseudo_labels_written_per_video() {
    let b = bundle();
    ok(&["pseudo-labels", "--manifest", s(&b.manifest), "--out", s(&b.root)]);
    let text = fs::read_to_string(b.root.join("pseudo/vid000.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let segs = v["segments"].as_array().unwrap();
    assert!(!segs.is_empty());
    assert_eq!(segs[0]["start"], 0);
    for seg in segs {
        let class = seg["class"].as_u64().unwrap();
        assert!((1..=5).contains(&class));
        assert!(seg["mean"].as_f64().is_some());
    }
    assert_eq!(fs::read_dir(b.root.join("pseudo")).unwrap().count(), 10);
}

#[test]
fn train_evaluate_summarize_round_trip() {
    let b = bundle();
    let train = |out: &str, seed: &str| {
        let dir = b.root.join(out);
        ok(&[
            "finetune", "--manifest", s(&b.manifest), "--config", s(&b.config), "--seed", seed, "--out", s(&dir),
        ]);
        dir
    };
    let run_a = train("a", "7");
    let run_b = train("b", "7");
    let run_c = train("c", "8");
    let ckpt = |d: &Path| fs::read(d.join("checkpoint.qvs")).unwrap();
    assert_eq!(ckpt(&run_a), ckpt(&run_b));
    assert_ne!(ckpt(&run_a), ckpt(&run_c));

    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_a.join("train_report.json")).unwrap()).unwrap();
    let phases: Vec<&str> = reports
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["phase"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["pretrain", "finetune"]);
    assert_eq!(reports[1]["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(reports[0]["seed"], 7);

    let evaluate = |run: &Path, report: &str| {
        let path = b.root.join(report);
        ok(&[
            "evaluate", "--manifest", s(&b.manifest), "--checkpoint", s(&run.join("checkpoint.qvs")),
            "--split", "test", "--budget", "0.15", "--beta", "1.0", "--report", s(&path),
        ]);
        fs::read_to_string(path).unwrap()
    };
    let ra = evaluate(&run_a, "ea.json");
    assert_eq!(ra, evaluate(&run_b, "eb.json"));
    let report: serde_json::Value = serde_json::from_str(&ra).unwrap();
    assert_eq!(report["beta"], 1.0);
    assert_eq!(report["per_video"].as_array().unwrap().len(), 1);
    let f = report["mean_f_beta"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
    assert_eq!(report["checkpoint_hash"].as_str().unwrap().len(), 64);

    let csv = b.root.join("plot.csv");
    let stdout = ok(&[
        "summarize", "--manifest", s(&b.manifest), "--checkpoint", s(&run_a.join("checkpoint.qvs")),
        "--video", "vid003", "--query", "w2 w7 unknownword", "--csv", s(&csv),
    ]);
    let sel: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let mask = sel["mask"].as_array().unwrap();
    let picked = mask.iter().filter(|m| m.as_bool().unwrap()).count();
    assert_eq!(picked, (0.15 * mask.len() as f64).ceil() as usize);
    let lines: Vec<String> = fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(lines[0], "frame,expected_score,selected");
    assert_eq!(lines.len(), mask.len() + 1);
}

#[test]
fn bad_requests_fail_cleanly() {
    let b = bundle();
    let run = b.root.join("p");
    ok(&["pretrain", "--manifest", s(&b.manifest), "--config", s(&b.config), "--out", s(&run)]);
    let ckpt = run.join("checkpoint.qvs");

    let out = qvsumm(&["evaluate", "--manifest", s(&b.manifest), "--checkpoint", s(&ckpt), "--split", "holdout"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("holdout"));

    let out = qvsumm(&["evaluate", "--manifest", s(&b.manifest), "--checkpoint", s(&ckpt), "--budget", "0"]);
    assert!(!out.status.success());

    let out = qvsumm(&["summarize", "--manifest", s(&b.manifest), "--checkpoint", s(&ckpt), "--video", "nope"]);
    assert!(!out.status.success());

    let zero = b.root.join("zero.json");
    fs::write(&zero, r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = qvsumm(&["pretrain", "--manifest", s(&b.manifest), "--config", s(&zero), "--out", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}
