//! Cross-module flows: determinism of whole runs and the disk round trip
//! from generator output to a trained model.

use std::path::Path;

use hypool::cli::{
    run_experiment, DatasetSpec, ExperimentConfig, HeadSpec, OptimizerConfig, SplitKind, TaskKind,
};
use hypool::data::{generate_hierarchy, load_bundle, save_bundle, HierarchyGenSpec};
use hypool::gnn::{Activation, BackboneConfig, BackboneKind};
use hypool::kernels::KernelSpec;
use hypool::verify::run_verify;

fn small_spec(seed: u64) -> HierarchyGenSpec {
    HierarchyGenSpec {
        branching: 2,
        depth: 2,
        nodes_per_leaf_class: 12,
        intra_p: 0.6,
        inter_decay: 0.3,
        feature_noise: 0.5,
        seed,
    }
}

fn small_config(dataset: DatasetSpec, out_dir: std::path::PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskKind::Nc,
        dataset,
        split: SplitKind::Public,
        backbone: BackboneConfig {
            kind: BackboneKind::Gcn,
            hidden: 8,
            layers: 2,
            dropout: 0.1,
            activation: Activation::Relu,
            alpha: 0.1,
            theta: 0.5,
        },
        head: HeadSpec::FullBp,
        kernel: KernelSpec::Poly2,
        lambda_kr: 1e-3,
        curvature: 1.0,
        optimizer: OptimizerConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 40,
            patience: 20,
        },
        kr_batch: 16,
        seeds: vec![0, 1],
        out_dir,
    }
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn identical_configs_rewrite_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(DatasetSpec::Synthetic { synthetic: small_spec(3) }, out.clone());

    run_experiment(&cfg).unwrap();
    let first: Vec<Vec<u8>> = ["metrics.json", "curves.csv", "lipschitz.json"]
        .iter()
        .map(|n| read(&out, n))
        .collect();

    std::fs::remove_dir_all(&out).unwrap();
    run_experiment(&cfg).unwrap();
    for (i, name) in ["metrics.json", "curves.csv", "lipschitz.json"].iter().enumerate() {
        assert_eq!(first[i], read(&out, name), "{name} changed between reruns");
    }
}

#[test]
fn verify_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = run_verify(&a).unwrap();
    let sb = run_verify(&b).unwrap();
    assert_eq!(sa.failed, sb.failed);
    for name in [
        "summary.json",
        "distance_additivity.json",
        "approx_gap.json",
        "approx_gap_curve.csv",
        "angle_ratio.json",
        "angle_ratio_curve.csv",
        "expansion.json",
        "expansion_curve.csv",
        "reduction.json",
        "inverse_pooling.json",
    ] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs between runs");
    }
}

#[test]
fn generated_bundle_survives_disk_and_trains() {
    let dir = tempfile::tempdir().unwrap();
    let bundle_dir = dir.path().join("bundle");
    let bundle = generate_hierarchy(&small_spec(9)).unwrap();
    save_bundle(&bundle, &bundle_dir).unwrap();
    let loaded = load_bundle(&bundle_dir).unwrap();
    assert_eq!(bundle, loaded);

    let cfg = small_config(
        DatasetSpec::Path { path: bundle_dir.clone() },
        dir.path().join("run"),
    );
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.per_seed.len(), 2);
    assert!((0.0..=1.0).contains(&report.mean));
}
