use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");

fn pava(cwd: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pava"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn pava")
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs one command and checks that every new or changed file is under `out`.
fn step(work: &Path, cwd: &Path, out: &str, args: &[&str]) {
    let before = files(work);
    let mut full = vec!["--config", CONFIG];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", out]);
    let res = pava(cwd, &full);
    assert!(
        res.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    let out_rel = Path::new(out).strip_prefix(work).unwrap();
    for (path, bytes) in files(work) {
        if before.get(&path) != Some(&bytes) {
            assert!(path.starts_with(out_rel), "{args:?} wrote {} outside {out}", path.display());
        }
    }
    assert!(std::fs::read_dir(cwd).unwrap().next().is_none(), "{args:?} wrote to the working directory");
}

fn pipeline(work: &Path) {
    let cwd = tempfile::tempdir().unwrap();
    let cwd = cwd.path();
    let w = |p: &str| work.join(p).to_str().unwrap().to_string();
    step(work, cwd, &w("data"), &["synth"]);
    step(work, cwd, &w("btrain"), &["redact", "--in", &w("data/train.jsonl")]);
    step(work, cwd, &w("btest"), &["redact", "--in", &w("data/test.jsonl")]);
    step(work, cwd, &w("orig"), &["train", "--train", &w("data/train.jsonl"), "--epochs", "6"]);
    step(
        work,
        cwd,
        &w("ft"),
        &["finetune", "--model", &w("orig/model.ckpt"), "--train", &w("btrain/manifest.jsonl"), "--epochs", "4"],
    );
    let (m1, m2) = (format!("orig={}", w("orig/model.ckpt")), format!("ft={}", w("ft/model.ckpt")));
    step(
        work,
        cwd,
        &w("ens"),
        &["ensemble-build", "--member", &m1, "--member", &m2, "--calibration", &w("orig/val.jsonl")],
    );
    let ens = w("ens/ensemble.json");
    step(work, cwd, &w("eval_o"), &["evaluate", "--ensemble", &ens, "--manifest", &w("data/test.jsonl")]);
    step(work, cwd, &w("eval_b"), &["evaluate", "--ensemble", &ens, "--manifest", &w("btest/manifest.jsonl")]);
    step(
        work,
        cwd,
        &w("report"),
        &["report", "--original", &w("eval_o/metrics.json"), "--blurred", &w("eval_b/metrics.json")],
    );
    step(work, cwd, &w("pred"), &["predict", "--ensemble", &ens, "--manifest", &w("btest/manifest.jsonl")]);
    step(work, cwd, &w("pred_one"), &["predict", "--model", &w("orig/model.ckpt"), "--in", &w("data/clips/chat-000.pclip")]);
}

/// File contents with the run's root directory replaced, so absolute paths
/// in manifests do not count as differences.
fn normalized(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let prefix = root.to_str().unwrap();
    files(root)
        .into_iter()
        .map(|(p, bytes)| match String::from_utf8(bytes) {
            Ok(text) => (p, text.replace(prefix, "<root>").into_bytes()),
            Err(e) => (p, e.into_bytes()),
        })
        .collect()
}

#[test]
fn desk_pipeline_is_reproducible_and_stays_in_its_output_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (a, b) = (a.path().canonicalize().unwrap(), b.path().canonicalize().unwrap());
    pipeline(&a);
    pipeline(&b);

    let (fa, fb) = (normalized(&a), normalized(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (path, bytes) in &fa {
        assert!(fb[path] == *bytes, "{} differs between runs", path.display());
    }
    for expected in [
        "data/manifest.jsonl",
        "data/train.jsonl",
        "data/test.jsonl",
        "btrain/anomaly.json",
        "btrain/presence.jsonl",
        "orig/model.ckpt",
        "orig/last.ckpt",
        "orig/history.csv",
        "ft/model.ckpt",
        "ens/ensemble.json",
        "eval_o/metrics.json",
        "eval_o/confusion.csv",
        "eval_o/f1_by_class.csv",
        "report/f1_by_class.csv",
        "report/summary.csv",
        "pred/predictions.jsonl",
        "pred_one/predictions.jsonl",
    ] {
        assert!(fa.contains_key(Path::new(expected)), "missing {expected}");
    }

    let metrics: serde_json::Value = serde_json::from_slice(&fa[Path::new("eval_o/metrics.json")]).unwrap();
    assert_eq!(metrics["evaluated_clips"], 10);
    let anomaly: serde_json::Value = serde_json::from_slice(&fa[Path::new("btrain/anomaly.json")]).unwrap();
    for s in anomaly["summaries"].as_array().unwrap() {
        assert_eq!(s["anomaly_frame_count"], 0);
    }
    let history = String::from_utf8(fa[Path::new("orig/history.csv")].clone()).unwrap();
    assert_eq!(history.lines().count(), 7);
}

#[test]
fn exit_codes() {
    let cwd = tempfile::tempdir().unwrap();
    assert_eq!(pava(cwd.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(pava(cwd.path(), &["train", "--bogus"]).status.code(), Some(1));
    let missing = pava(
        cwd.path(),
        &["evaluate", "--model", "absent.ckpt", "--manifest", "absent.jsonl", "--out", "r"],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(!cwd.path().join("r").exists());
    let ok = pava(cwd.path(), &["synth", "--classes", "2", "--clips-per-class", "2", "--frames", "4", "--out", "d"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(cwd.path().join("d/manifest.jsonl").exists());
}
