use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use uatta_core::io::{load_embeddings, save_scores};
use uatta_core::retrieval::cosine_similarity;

const SMALL: &str = "seed = 11\n[simulate]\nn_identities = 30\ndim = 16\n[adapt]\nrounds = 4\n";

fn uatta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uatta"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes the small config and a simulated dataset under `dir`.
fn dataset(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let config = dir.join("run.toml");
    fs::write(&config, SMALL).unwrap();
    let data = dir.join("data");
    let out = uatta(&["simulate", "--config", s(&config), "--out", s(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    (config, data.join("text.ueb"), data.join("image.ueb"))
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let again = tmp.path().join("again");
    assert!(uatta(&["simulate", "--config", s(&config), "--out", s(&again)]).status.success());
    assert_eq!(fs::read(&text).unwrap(), fs::read(again.join("text.ueb")).unwrap());
    assert_eq!(fs::read(&image).unwrap(), fs::read(again.join("image.ueb")).unwrap());

    let t = load_embeddings(&text).unwrap();
    let i = load_embeddings(&image).unwrap();
    assert_eq!((t.count(), i.count(), t.dim()), (60, 150, 16));

    let other = tmp.path().join("other");
    uatta(&["simulate", "--config", s(&config), "--seed", "12", "--out", s(&other)]);
    assert_ne!(fs::read(&text).unwrap(), fs::read(other.join("text.ueb")).unwrap());
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[adapt]\nlearning_rat = 0.1\n").unwrap();
    let out = uatta(&["simulate", "--config", s(&config), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn bad_flags_exit_one() {
    assert_eq!(uatta(&["adapt", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(uatta(&["adapt"]).status.code(), Some(1));
    assert_eq!(uatta(&["simulate"]).status.code(), Some(1));
    assert_eq!(uatta(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_input_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let (_, text, _) = dataset(tmp.path());
    let junk = tmp.path().join("junk.ueb");
    fs::write(&junk, b"UEB1 but not really").unwrap();
    let out = uatta(&["evaluate", "--text", s(&text), "--image", s(&junk)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let missing = tmp.path().join("missing.ueb");
    let out = uatta(&["evaluate", "--text", s(&text), "--image", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_rounds_changes_nothing() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let run = tmp.path().join("run");
    let out = uatta(&[
        "adapt", "--config", s(&config), "--text", s(&text), "--image", s(&image), "--rounds", "0",
        "--out", s(&run),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for m in ["r1", "r5", "r10", "map"] {
        assert_eq!(report["delta"][m].as_f64(), Some(0.0), "{m}");
    }
    assert_eq!(report["rounds"].as_u64(), Some(0));
}

#[test]
fn scores_alone_cannot_be_adapted() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let t = load_embeddings(&text).unwrap();
    let i = load_embeddings(&image).unwrap();
    let scores = tmp.path().join("s.usm");
    save_scores(&cosine_similarity(&t, &i).unwrap(), &scores).unwrap();

    let out = uatta(&["adapt", "--config", s(&config), "--scores", s(&scores), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("score matrix"), "{}", stderr(&out));

    // The unadapted baseline still works on scores, with labels from the sets.
    let out = uatta(&[
        "adapt", "--config", s(&config), "--scores", s(&scores), "--text", s(&text), "--image",
        s(&image), "--baseline", "none", "--out", s(&tmp.path().join("none")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = uatta(&["evaluate", "--scores", s(&scores)]);
    assert_eq!(out.status.code(), Some(2), "no labels: {}", stderr(&out));
}

#[test]
fn pipeline_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        let out = uatta(&[
            "adapt", "--config", s(&config), "--text", s(&text), "--image", s(&image), "--out",
            s(&run),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        dirs.push(run);
    }
    for f in [
        "head.uch",
        "history.csv",
        "selection.json",
        "config.toml",
        "metrics_before.json",
        "metrics_after.json",
        "report.json",
    ] {
        assert_eq!(
            fs::read(dirs[0].join(f)).unwrap(),
            fs::read(dirs[1].join(f)).unwrap(),
            "{f} differs"
        );
    }

    // `report` rebuilds the same document from the run directory.
    let rebuilt = tmp.path().join("rebuilt");
    let out = uatta(&["report", "--run", s(&dirs[0]), "--out", s(&rebuilt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(rebuilt.join("report.json")).unwrap(),
        fs::read(dirs[0].join("report.json")).unwrap()
    );

    // The saved head reproduces the after-metrics.
    let out = uatta(&[
        "evaluate", "--text", s(&text), "--image", s(&image), "--head", s(&dirs[0].join("head.uch")),
    ]);
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let after: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dirs[0].join("metrics_after.json")).unwrap())
            .unwrap();
    let (p, a) = (printed["r1"].as_f64().unwrap(), after["r1"].as_f64().unwrap());
    assert!((p - a).abs() < 1e-4, "{p} vs {a}");
}

#[test]
fn diagnose_writes_its_outputs() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let out_dir = tmp.path().join("diag");
    let out = uatta(&[
        "diagnose", "--config", s(&config), "--text", s(&text), "--image", s(&image), "--variant",
        "logratio", "--out", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("diagnostics.json")).unwrap())
            .unwrap();
    assert_eq!(summary["variant"], "logratio");
    let (tp, fp) = (summary["n_tp"].as_u64().unwrap(), summary["n_fp"].as_u64().unwrap());
    assert_eq!(tp + fp, 60);

    let hist = fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("bin_low,bin_high,tp,fp"));
    let counts = lines.fold((0, 0), |(t, f), l| {
        let c: Vec<u64> = l.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        (t + c[0], f + c[1])
    });
    assert_eq!(counts, (tp, fp));
    assert!(fs::read_to_string(out_dir.join("histogram.svg")).unwrap().starts_with("<svg"));
    let pairs = fs::read_to_string(out_dir.join("uncertainty.csv")).unwrap();
    assert!(pairs.starts_with("query_id,candidate_id,p_t2i,p_i2t,d,variant\n"));
}

#[test]
fn select_prints_the_reliable_set() {
    let tmp = TempDir::new().unwrap();
    let (config, text, image) = dataset(tmp.path());
    let out = uatta(&["select", "--config", s(&config), "--text", s(&text), "--image", s(&image), "--k", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dump: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["k"], 1);
    let n = dump["n_reliable"].as_u64().unwrap() + dump["n_rejected"].as_u64().unwrap();
    assert_eq!(n, 60);
    let out = uatta(&["select", "--text", s(&text), "--image", s(&image), "--k", "0"]);
    assert_eq!(out.status.code(), Some(1));
}
