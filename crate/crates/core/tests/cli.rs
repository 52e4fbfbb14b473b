use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use edgeseg::cli::{run, Cli};

fn write_config(root: &Path) -> PathBuf {
    let config = serde_json::json!({
        "data_dir": root.join("data"),
        "image_size": 32,
        "arch": {"input_channels": 1, "encoder_channels": [4, 8], "bottleneck_channels": 8},
        "train": {"epochs": 2, "batch_size": 8},
        "finetune": {"epochs": 2},
        "shots": [1, 3],
        "selections": 2,
        "synthetic": {"images_per_source": 8, "target_images": 8}
    });
    let path = root.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn invoke(args: &[&str]) -> i32 {
    run(Cli::parse_from(std::iter::once("edgeseg").chain(args.iter().copied())))
}

fn common<'a>(cfg: &'a str, out: &'a str, method: &'a str, fraction: &'a str) -> Vec<&'a str> {
    vec!["--config", cfg, "--synthetic", "--seed", "3", "--method", method, "--unlabelled-fraction", fraction, "--out", out]
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn run_dir(runs: &Path) -> PathBuf {
    fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("results.csv").is_file())
        .expect("a finished run")
}

#[test]
fn prepare_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for root in [a.path(), b.path()] {
        let cfg = write_config(root);
        let out = root.join("runs");
        let args = common(cfg.to_str().unwrap(), out.to_str().unwrap(), "edge_joint", "0.6");
        let mut full = vec!["prepare"];
        full.extend(args);
        assert_eq!(invoke(&full), 0);
    }
    let ta = tree_bytes(&a.path().join("data"));
    let tb = tree_bytes(&b.path().join("data"));
    assert!(!ta.is_empty());
    assert!(ta.iter().any(|(p, _)| p.to_string_lossy().contains("edges")));
    assert_eq!(ta, tb);
}

#[test]
fn missing_masks_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let src = root.join("cells");
    fs::create_dir_all(src.join("images")).unwrap();
    let tgt = root.join("target");
    fs::create_dir_all(tgt.join("images")).unwrap();
    fs::create_dir_all(tgt.join("masks")).unwrap();
    let config = serde_json::json!({"sources": [src], "target": tgt});
    let cfg = root.join("config.json");
    fs::write(&cfg, config.to_string()).unwrap();

    let output = Command::new(env!("CARGO_BIN_EXE_edgeseg"))
        .args(["prepare", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains(&src.join("masks").display().to_string()), "{stderr}");
}

#[test]
fn unknown_method_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let output = Command::new(env!("CARGO_BIN_EXE_edgeseg"))
        .args(["experiment", "--config", cfg.to_str().unwrap(), "--synthetic", "--method", "simclr"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("simclr") && stderr.contains("edge_joint"), "{stderr}");
}

#[test]
fn inconsistent_fraction_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let mut args = vec!["experiment"];
    args.extend(common(cfg.to_str().unwrap(), out.to_str().unwrap(), "supervised", "0.3"));
    assert_eq!(invoke(&args), 2);
}

#[test]
fn interrupted_experiment_resumes_to_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let args = common(cfg.to_str().unwrap(), out.to_str().unwrap(), "edge_joint", "0.3");
    for sub in ["prepare", "experiment"] {
        let mut full = vec![sub];
        full.extend(args.iter().copied());
        assert_eq!(invoke(&full), 0);
    }
    let run = run_dir(&out);
    let results = run.join("results.csv");
    let complete = fs::read_to_string(&results).unwrap();
    assert_eq!(complete.lines().count(), 1 + 2 * 2);
    assert!(run.join("checkpoint.bin").is_file());
    assert!(run.join("history.csv").is_file());
    assert!(run.join("summary.json").is_file());

    // drop the last two episodes as if the process had been killed
    let kept: Vec<&str> = complete.lines().take(3).collect();
    fs::write(&results, kept.join("\n") + "\n").unwrap();
    let mut full = vec!["experiment"];
    full.extend(args.iter().copied());
    assert_eq!(invoke(&full), 0);
    assert_eq!(fs::read_to_string(&results).unwrap(), complete);
}

#[test]
fn report_writes_table_curves_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let o = out.to_str().unwrap();
    for (method, fraction) in [("supervised", "0"), ("edge_joint", "0.6")] {
        for sub in ["prepare", "experiment"] {
            let mut full = vec![sub];
            full.extend(common(cfg.to_str().unwrap(), o, method, fraction));
            assert_eq!(invoke(&full), 0);
        }
    }
    assert_eq!(invoke(&["report", "--runs", o]), 0);
    let report = out.join("report");
    let table = fs::read_to_string(report.join("comparison.md")).unwrap();
    assert!(table.contains("supervised") && table.contains("edge_joint"), "{table}");
    assert!(table.contains("1-shot") && table.contains("3-shot"), "{table}");
    assert!(report.join("curves_inverted.png").is_file());
    let csv = fs::read_to_string(report.join("curves_inverted.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    let overlays = fs::read_dir(&report)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("overlay_"))
        .count();
    assert_eq!(overlays, 2 * 2);
}

#[test]
fn report_without_runs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("nothing");
    assert_eq!(invoke(&["report", "--runs", runs.to_str().unwrap()]), 2);
}
