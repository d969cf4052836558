use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

/// Runs the binary in `dir`; `args` is split on whitespace.
fn geognn(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geognn"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args.split_whitespace())
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &str) -> Output {
    let out = geognn(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn keys(path: &Path) -> BTreeSet<String> {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn set(names: &str) -> BTreeSet<String> {
    names.split_whitespace().map(String::from).collect()
}

/// Small synthetic dataset plus a short training config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        "synth --nodes 90 --dim 8 --classes 3 --p-in 0.15 --p-out 0.01 --out data",
    );
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"data": {"features": "data/features.gemb", "edges": "data/edges.tsv", "labels": "data/labels.tsv"},
            "model": {"heads": 2, "head_dim": 4},
            "train": {"epochs": 4, "seeds": [0, 1], "lr": 0.01}}"#,
    )
    .unwrap();
    dir
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&geognn(dir.path(), "--help")), 0);
    assert_eq!(code(&geognn(dir.path(), "frobnicate")), 2);
    assert_eq!(code(&geognn(dir.path(), "synth --out x --bogus")), 2);
    assert_eq!(code(&geognn(dir.path(), "drift --out x")), 2);
    assert_eq!(code(&geognn(dir.path(), "synth --nodes many --out x")), 2);
}

#[test]
fn io_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let missing = geognn(p, "train --config absent.json");
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.json"));

    std::fs::write(p.join("typo.json"), r#"{"model": {"heds": 2}}"#).unwrap();
    let typo = geognn(p, "train --config typo.json");
    assert_eq!(code(&typo), 2);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("heds"));

    std::fs::write(p.join("bad.gemb"), b"not an embedding").unwrap();
    assert_eq!(code(&geognn(p, "drift --reference bad.gemb --out d")), 2);

    // synth spec with p_in <= p_out
    assert_eq!(code(&geognn(p, "synth --p-in 0.01 --p-out 0.1 --out s")), 2);
}

#[test]
fn synth_writes_dataset() {
    let dir = workspace();
    let data = dir.path().join("data");
    for f in ["features.gemb", "labels.tsv", "edges.tsv", "spec.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let x = geognn::io::read_features(&data.join("features.gemb")).unwrap();
    assert_eq!(x.dim(), (90, 8));
    assert_eq!(geognn::io::read_labels(&data.join("labels.tsv"), 90).unwrap().len(), 90);
}

#[test]
fn drift_curve_has_row_per_layer() {
    let dir = workspace();
    let p = dir.path();
    ok(p, "drift --reference data/features.gemb --edges data/edges.tsv --aggregator mean --layers 4 --k 10 --r 4 --out curve");
    let csv = std::fs::read_to_string(p.join("curve/drift_curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,aggregator,mean_drift");
    assert_eq!(lines.len(), 6);
    for (l, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{l},mean,")));
    }
}

#[test]
fn smooth_then_drift_single_report_schema() {
    let dir = workspace();
    let p = dir.path();
    ok(
        p,
        "smooth --features data/features.gemb --edges data/edges.tsv --aggregator geodesic,laplacian --layers 2 --out sm",
    );
    assert_eq!(keys(&p.join("sm/manifest.json")), set("features edges runs"));
    ok(
        p,
        "drift --reference data/features.gemb --current sm/geodesic_layer2.gemb --k 10 --r 4 --out one",
    );
    assert_eq!(
        keys(&p.join("one/drift.json")),
        set("mean_drift k r epsilon layer excluded_nodes reduced_rank_nodes per_node")
    );
    let csv = std::fs::read_to_string(p.join("one/drift_per_node.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("node_id,drift"));
    assert_eq!(csv.lines().count(), 91);

    ok(
        p,
        "drift --reference data/features.gemb --manifest sm/manifest.json --k 10 --r 4 --out many",
    );
    let curve = std::fs::read_to_string(p.join("many/drift_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 3);
}

#[test]
fn train_and_eval_report_schema() {
    let dir = workspace();
    let p = dir.path();
    ok(p, "train --config cfg.json");
    let runs = p.join("runs");
    for f in ["checkpoint_seed0.bin", "checkpoint_seed1.bin", "aggregate.csv"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    assert_eq!(
        keys(&runs.join("metrics_seed0.json")),
        set("task seed config epochs best_epoch best_val train test")
    );
    assert_eq!(keys(&runs.join("summary.json")), set("per_seed mean std"));
    let agg = std::fs::read_to_string(runs.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().next(), Some("seed,test"));

    ok(
        p,
        "eval --config cfg.json --checkpoint runs/checkpoint_seed0.bin --out eval.json",
    );
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("eval.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("metrics_seed0.json")).unwrap()).unwrap();
    assert_eq!(eval["test"], metrics["test"]);
}

#[test]
fn link_training_runs() {
    let dir = workspace();
    let p = dir.path();
    let out = geognn(p, "train --config cfg.json --task link --out link");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("link/metrics_seed0.json")).unwrap()).unwrap();
    assert_eq!(m["task"], "link");
    assert!((0.0..=1.0).contains(&m["test"].as_f64().unwrap()));
}

#[test]
fn gridsearch_covers_every_cell() {
    let dir = workspace();
    let p = dir.path();
    ok(
        p,
        "gridsearch --config cfg.json --taus 0.1,1 --alphas 0.5,1,10 --out grid",
    );
    let csv = std::fs::read_to_string(p.join("grid/grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tau,alpha,layers,heads,mean_val,mean_test,std_test,status");
    assert_eq!(lines.len(), 7);
    assert!(lines[1..]
        .iter()
        .all(|l| l.split(',').count() == 8 && l.ends_with(",ok")));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), "gradcheck --seed 0");
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    assert_eq!(code(&geognn(dir.path(), "gradcheck --threshold 1e-300")), 3);
}

#[test]
fn single_threaded_reports_are_bitwise_stable() {
    let dir = workspace();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(p, &format!("--threads 1 train --config cfg.json --out {run}/train"));
        ok(
            p,
            &format!(
                "--threads 1 smooth --features data/features.gemb --edges data/edges.tsv \
                 --aggregator attention,geodesic --layers 2 --out {run}/smooth"
            ),
        );
        ok(
            p,
            &format!(
                "--threads 1 drift --reference data/features.gemb --manifest {run}/smooth/manifest.json \
                 --k 10 --r 4 --out {run}/drift"
            ),
        );
    }
    let mut compared = 0;
    for sub in ["train", "smooth", "drift"] {
        for entry in std::fs::read_dir(p.join("a").join(sub)).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(p.join("a").join(sub).join(&name)).unwrap();
            let b = std::fs::read(p.join("b").join(sub).join(&name)).unwrap();
            assert!(a == b, "{sub}/{}", name.to_string_lossy());
            compared += 1;
        }
    }
    assert!(compared > 10);
}
