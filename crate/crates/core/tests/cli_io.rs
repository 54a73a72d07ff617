//! Black-box checks of the installed binary: exit codes, stderr routing, and
//! the files each subcommand leaves behind.

use std::path::Path;
use std::process::{Command, Output};

use hypool::data::load_bundle;

fn hypool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypool"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn gen_hierarchy_then_delta_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle_dir = dir.path().join("bundle");
    let out = hypool(&["gen-hierarchy", "--out", bundle_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["meta.json", "features.bin", "edges.tsv", "labels.tsv", "masks.tsv"] {
        assert!(bundle_dir.join(name).exists(), "missing {name}");
    }
    load_bundle(&bundle_dir).unwrap();

    let out = hypool(&["delta", "--bundle", bundle_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("delta"), "got: {}", stdout(&out));
}

#[test]
fn gen_hierarchy_honors_a_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"branching":2,"depth":2,"nodes_per_leaf_class":5,"intra_p":0.6,"inter_decay":0.3,"feature_noise":0.5,"seed":7}"#,
    )
    .unwrap();
    let bundle_dir = dir.path().join("bundle");
    let out = hypool(&[
        "gen-hierarchy",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        bundle_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bundle = load_bundle(&bundle_dir).unwrap();
    assert_eq!(bundle.meta.n, 20); // 2^2 leaf classes x 5 nodes
    assert_eq!(bundle.meta.num_classes, 4);
}

#[test]
fn verify_selected_tags_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = hypool(&[
        "verify",
        "--only",
        "expansion,reduction",
        "--out",
        dir.path().join("v").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS]"));
    assert!(!text.contains("[FAIL]"), "got: {text}");
}

#[test]
fn verify_full_run_fails_on_known_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = hypool(&["verify", "--out", dir.path().join("v").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert_eq!(text.matches("[FAIL]").count(), 4, "got: {text}");
    assert!(text.contains("orthogonal-additivity-error-below-1e-2"));
    assert!(dir.path().join("v/summary.json").exists());
}

fn write_config(path: &Path, out_dir: &Path) {
    let body = format!(
        r#"{{
  "task": "nc",
  "dataset": {{"synthetic": {{"branching":2,"depth":2,"nodes_per_leaf_class":10,"intra_p":0.6,"inter_decay":0.3,"feature_noise":0.5,"seed":1}}}},
  "split": "public",
  "backbone": {{"kind":"gcn","hidden":8,"layers":2,"dropout":0.0}},
  "head": {{"kind":"full_bp"}},
  "lambda_kr": 0.001,
  "optimizer": {{"lr":0.01,"weight_decay":0.0005,"epochs":30,"patience":10}},
  "seeds": [0],
  "out_dir": {:?}
}}"#,
        out_dir.to_str().unwrap()
    );
    std::fs::write(path, body).unwrap();
}

#[test]
fn run_writes_reports_and_refuses_a_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out_dir = dir.path().join("run");
    write_config(&cfg, &out_dir);

    let out = hypool(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let metrics: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(out_dir.join("metrics.json")).unwrap()).unwrap();
    let mean = metrics["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean), "mean {mean}");

    let again = hypool(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("refusing"), "got: {}", stderr(&again));
}

#[test]
fn ablate_kernel_writes_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out_dir = dir.path().join("sweep");
    write_config(&cfg, &out_dir);
    let out = hypool(&["run", "--config", cfg.to_str().unwrap(), "--ablate", "kernel"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_dir.join("ablation.csv").exists());
}

#[test]
fn errors_reach_stderr_with_nonzero_exit() {
    let out = hypool(&["delta", "--bundle", "/nonexistent/bundle"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "got: {}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{not json").unwrap();
    let out = hypool(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error:"), "got: {}", stderr(&out));
}

#[test]
fn rejects_an_unknown_ablation_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_config(&cfg, &dir.path().join("run"));
    let out = hypool(&["run", "--config", cfg.to_str().unwrap(), "--ablate", "bogus"]);
    assert!(!out.status.success());
}
