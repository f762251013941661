use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn guideseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guideseg"))
        .args(args)
        .env_remove("GUIDESEG_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small overlapping-blob dataset; returns the manifest path.
fn dataset(dir: &Path, count: usize) -> PathBuf {
    let out = guideseg(&[
        "fixtures", "generate", "--out", s(dir), "--count", &count.to_string(), "--seed", "5",
        "--height", "40", "--width", "40", "--overlap",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = dir.join("manifest.jsonl");
    assert_eq!(stdout(&out).trim(), s(&manifest));
    manifest
}

fn labels_of(manifest: &Path, line: usize) -> String {
    let rec: Value = serde_json::from_str(fs::read_to_string(manifest).unwrap().lines().nth(line).unwrap()).unwrap();
    rec["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn run_eval_and_sweeps_over_fixture_set() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(&tmp.path().join("data"), 4);
    let config = tmp.path().join("run.toml");
    fs::write(&config, "strategy = \"g2\"\ncrf_preset = \"v2\"\noutput_dir = \"guides\"\n").unwrap();

    let out = guideseg(&["run", "--manifest", s(&manifest), "--config", s(&config), "--threads", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["processed"], 4);
    assert_eq!(report["failed"], 0);
    assert!(report["totals"]["iou"]["mean"].as_f64().unwrap() > 0.0);
    // output_dir resolves against the config's directory
    let guides = tmp.path().join("guides");
    for k in 0..4 {
        assert!(guides.join(format!("scene{k:04}.png")).exists());
    }

    let out = guideseg(&["eval", "--manifest", s(&manifest), "--guides", s(&guides), "--num-classes", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(eval["evaluated"], 4);
    // same guides, same counts as the batch report
    assert_eq!(eval["totals"]["confusion"], report["totals"]["confusion"]);

    let out = guideseg(&["eval", "--manifest", s(&manifest), "--guides", s(&guides), "--num-classes", "3", "--csv"]);
    let csv = stdout(&out);
    assert!(csv.starts_with("id,fg_precision,fg_recall,bg_precision,bg_recall\n"));
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("total,"));

    let out = guideseg(&["prcurve", "--manifest", s(&manifest), "--steps", "10", "--csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("tau,precision,recall,class\n"));

    let out = guideseg(&["mp", "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mp: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let (fg, bg, m) = (
        mp["fg_precision"].as_f64().unwrap(),
        mp["bg_precision"].as_f64().unwrap(),
        mp["mp"].as_f64().unwrap(),
    );
    assert!(((fg + bg) / 2.0 - m).abs() < 1e-12);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(&tmp.path().join("data"), 6);
    let mut reports = Vec::new();
    let mut masks = Vec::new();
    for threads in ["1", "3"] {
        let dir = tmp.path().join(format!("out{threads}"));
        let report = tmp.path().join(format!("report{threads}.json"));
        let out = guideseg(&[
            "run", "--manifest", s(&manifest), "--out", s(&dir), "--threads", threads, "--report", s(&report),
        ]);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).is_empty());
        reports.push(fs::read(&report).unwrap());
        masks.push((0..6).map(|k| fs::read(dir.join(format!("scene{k:04}.png"))).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(masks[0], masks[1]);
}

#[test]
fn record_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(&tmp.path().join("data"), 3);
    fs::remove_file(tmp.path().join("data/scene0001.sgsm")).unwrap();

    let out = guideseg(&["run", "--manifest", s(&manifest), "--threads", "1"]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!((report["processed"].as_u64(), report["failed"].as_u64()), (Some(2), Some(1)));
    assert_eq!(report["records"][1]["status"], "error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene0001"));

    // --strict aborts without a report
    let out = guideseg(&["run", "--manifest", s(&manifest), "--threads", "1", "--strict"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene0001"));

    // a corrupt input is still a record failure, not a usage error
    fs::write(tmp.path().join("data/scene0001.sgsm"), b"SGSM\x07").unwrap();
    assert_eq!(code(&guideseg(&["run", "--manifest", s(&manifest), "--threads", "1"])), 1);
    assert_eq!(code(&guideseg(&["run", "--manifest", s(&manifest), "--threads", "1", "--strict"])), 1);
}

#[test]
fn usage_and_format_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = dataset(&tmp.path().join("data"), 1);

    // unknown subcommand / missing required flag
    assert_eq!(code(&guideseg(&["frobnicate"])), 2);
    assert_eq!(code(&guideseg(&["fuse", "--strategy", "g2", "--saliency", "x", "--labels", "1", "--out", "y"])), 2);

    // malformed manifest line
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"a\"\n").unwrap();
    let out = guideseg(&["run", "--manifest", s(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));

    // unknown config key
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "strategy = \"g2\"\nfoo = 1\n").unwrap();
    assert_eq!(code(&guideseg(&["run", "--manifest", s(&manifest), "--config", s(&config)])), 2);

    // bad worker count from the environment
    let out = Command::new(env!("CARGO_BIN_EXE_guideseg"))
        .args(["run", "--manifest", s(&manifest)])
        .env("GUIDESEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    // corrupt heatmap for a single-image command
    let junk = tmp.path().join("junk.sgsm");
    fs::write(&junk, b"SGSM\x02\0\0\0").unwrap();
    let out = guideseg(&["seed", "--heatmap", s(&junk), "--labels", "1", "--out", s(&tmp.path().join("o.png"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn empty_manifest_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("empty.jsonl");
    fs::write(&manifest, "").unwrap();
    let out = guideseg(&["run", "--manifest", s(&manifest)]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["processed"], 0);
}

#[test]
fn single_image_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = dataset(&data, 1);
    let labels = labels_of(&manifest, 0);
    let file = |name: &str| data.join(format!("scene0000{name}"));
    let out_path = |name: &str| tmp.path().join(name);
    let ok = |args: &[&str]| {
        let out = guideseg(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };

    ok(&["seed", "--heatmap", s(&file(".sgsm")), "--labels", &labels, "--out", s(&out_path("seeds.png"))]);
    ok(&[
        "fuse", "--strategy", "g2", "--seeds", s(&out_path("seeds.png")), "--saliency", s(&file(".sal.sgsm")),
        "--image", s(&file(".png")), "--labels", &labels, "--out", s(&out_path("g2.png")),
    ]);
    ok(&[
        "fuse", "--strategy", "g1", "--saliency", s(&file(".sal.sgsm")), "--labels", &labels,
        "--g1-scores", s(&data.join("g1_scores.json")), "--id", "scene0000", "--out", s(&out_path("g1.png")),
    ]);
    ok(&[
        "fuse", "--strategy", "g0", "--saliency", s(&file(".sal.sgsm")), "--labels", &labels,
        "--rng-seed", "7", "--out", s(&out_path("g0.png")),
    ]);
    ok(&[
        "crf", "seed", "--seeds", s(&out_path("seeds.png")), "--image", s(&file(".png")), "--preset", "v2",
        "--out", s(&out_path("crf.png")),
    ]);
    ok(&[
        "crf", "postproc", "--probs", s(&file(".sgsm")), "--image", s(&file(".png")),
        "--out", s(&out_path("post.png")),
    ]);
    for name in ["seeds.png", "g2.png", "g1.png", "g0.png", "crf.png", "post.png"] {
        assert!(out_path(name).exists(), "{name}");
    }

    // the G2 guide written by hand matches the batch runner
    let batch = tmp.path().join("batch");
    ok(&["run", "--manifest", s(&manifest), "--out", s(&batch)]);
    assert_eq!(fs::read(out_path("g2.png")).unwrap(), fs::read(batch.join("scene0000.png")).unwrap());

    let exports = tmp.path().join("components");
    let out = ok(&[
        "export-components", "--saliency", s(&file(".sal.sgsm")), "--image", s(&file(".png")),
        "--id", "scene0000", "--out", s(&exports),
    ]);
    let n = serde_json::from_str::<Value>(&stdout(&out)).unwrap()["components"].as_u64().unwrap();
    assert!(n >= 1);
    for k in 1..=n {
        assert!(exports.join(format!("scene0000.c{k}.png")).exists());
        assert!(exports.join(format!("scene0000.c{k}.mask.png")).exists());
    }
    assert_eq!(fs::read_dir(&exports).unwrap().count() as u64, 2 * n);
}

#[test]
fn unknown_crf_preset_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 1);
    let out = guideseg(&[
        "crf", "postproc", "--probs", s(&data.join("scene0000.sgsm")), "--image", s(&data.join("scene0000.png")),
        "--preset", "v9", "--out", s(&tmp.path().join("o.png")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn large_images_need_the_approximate_crf() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = guideseg(&[
        "fixtures", "generate", "--out", s(&data), "--count", "1", "--height", "130", "--width", "130",
    ]);
    assert_eq!(code(&out), 0);
    let out = guideseg(&[
        "crf", "postproc", "--probs", s(&data.join("scene0000.sgsm")), "--image", s(&data.join("scene0000.png")),
        "--out", s(&tmp.path().join("o.png")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("approximate"));
    assert!(!tmp.path().join("o.png").exists());
}

#[test]
fn approximate_crf_runs_on_small_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 1);
    let out = guideseg(&[
        "crf", "postproc", "--probs", s(&data.join("scene0000.sgsm")), "--image", s(&data.join("scene0000.png")),
        "--preset", "v1", "--approx", "--out", s(&tmp.path().join("o.png")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("o.png").exists());
}
