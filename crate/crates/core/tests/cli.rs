// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `circuit-align` binary on the toy models.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuit_align::model::reference::verify_checksums;
use circuit_align::model::ModelBundle;
use circuit_align::report::{parse_provenance_line, CACHE_ENV};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_circuit-align"));
    c.env_remove(CACHE_ENV);
    c
}

fn run_ok(args: &[&str], out: &Path) -> PathBuf {
    let o = bin().args(args).arg("--out-dir").arg(out).output().unwrap();
    assert!(o.status.success(), "{args:?}\nstdout: {}\nstderr: {}", text(&o.stdout), text(&o.stderr));
    PathBuf::from(text(&o.stdout).trim())
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without(mut v: Value, keys: &[&str]) -> Value {
    if let Value::Object(m) = &mut v {
        for k in keys {
            m.remove(*k);
        }
    }
    v
}

const ALIGN: [&str; 6] = ["align", "--model", "toy:teacher", "--model2", "toy:student-medium", "--n=40"];

#[test]
fn align_is_reproducible_and_recomputable_from_its_pairs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest_a = run_ok(&ALIGN, a.path());
    let manifest_b = run_ok(&ALIGN, b.path());
    assert_eq!(manifest_a, a.path().join("align").join("manifest.json"));

    let (ma, mb) = (json(&manifest_a), json(&manifest_b));
    assert_eq!(ma["run_id"], mb["run_id"]);
    let timing = ["started", "wall_clock_secs", "flags"];
    assert_eq!(without(ma.clone(), &timing), without(mb.clone(), &timing));
    assert_eq!(ma["outputs"], serde_json::json!(["alignment.json", "alignment_pairs.csv"]));

    let read = |d: &Path, f: &str| std::fs::read(d.join("align").join(f)).unwrap();
    assert_eq!(read(a.path(), "alignment_pairs.csv"), read(b.path(), "alignment_pairs.csv"));
    let (ja, jb) = (json(&a.path().join("align/alignment.json")), json(&b.path().join("align/alignment.json")));
    assert_eq!(without(ja.clone(), &["timestamp"]), without(jb, &["timestamp"]));

    let score = ja["A"].as_f64().unwrap();
    let n_matched = ja["n_matched"].as_u64().unwrap() as f64;
    let from_json: f64 = ja["pairs"].as_array().unwrap().iter().map(|p| p["contribution"].as_f64().unwrap()).sum();
    assert!((from_json / n_matched - score).abs() < 1e-12);

    let csv = text(&read(a.path(), "alignment_pairs.csv"));
    let mut lines = csv.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "contribution").unwrap();
    let from_csv: f64 = lines.map(|l| l.split(',').nth(col).unwrap().parse::<f64>().unwrap()).sum();
    assert!((from_csv / n_matched - score).abs() < 1e-8, "{from_csv} {score}");
    assert!(score > 0.0 && score < 1.0);
}

#[test]
fn every_artifact_carries_the_run_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = run_ok(&["discover", "--model", "toy:student-high", "--n", "40"], dir.path());
    let manifest = json(&manifest_path);
    let run_id = manifest["run_id"].as_str().unwrap();
    let dataset_hash = manifest["dataset_hash"].as_str().unwrap();
    let digest = manifest["models"][0]["digest"].as_str().unwrap();
    let fixture = ModelBundle::load_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy_student_high")).unwrap();
    assert_eq!(digest, fixture.digest);

    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"circuit.json") && outputs.contains(&"circuit.dot"), "{outputs:?}");
    for name in outputs {
        let path = manifest_path.parent().unwrap().join(name);
        let body = std::fs::read_to_string(&path).unwrap();
        if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&body).unwrap();
            assert_eq!(v["run_id"], run_id, "{name}");
            assert_eq!(v["dataset_hash"], dataset_hash, "{name}");
            assert_eq!(v["model_digests"]["toy_student_high"], digest, "{name}");
        } else {
            let first = body.lines().next().unwrap();
            assert!(first.starts_with('#') || first.starts_with("//"), "{name}: {first}");
            let fields = parse_provenance_line(first);
            assert_eq!(fields["run_id"], run_id, "{name}");
            assert_eq!(fields["dataset_hash"], dataset_hash, "{name}");
            assert_eq!(fields["models"], format!("toy_student_high:{digest}"), "{name}");
        }
    }
    let circuit = json(&manifest_path.parent().unwrap().join("circuit.json"));
    let nodes: Vec<&str> = circuit["nodes"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(nodes, ["L0.MLP", "L0.H0", "L1.MLP", "L1.H0"]);
}

#[test]
fn sweep_reports_one_row_per_threshold_with_shrinking_circuits() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_ok(&["sweep", "--thresholds", "0.1,0.2,0.3", "--n", "40"], dir.path());
    let csv = std::fs::read_to_string(manifest.parent().unwrap().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# run_id="));
    assert_eq!(lines.next().unwrap(), "T_n,n_nodes,n_heads,n_mlps,completeness_pct,faithfulness_pct");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 3);
    let thresholds: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(thresholds, [0.1, 0.2, 0.3]);
    let nodes: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(nodes.windows(2).all(|w| w[0] >= w[1]), "{nodes:?}");
    assert!(nodes[0] > 0);
}

fn error_body(o: &Output) -> Value {
    serde_json::from_str(text(&o.stderr).trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", text(&o.stderr)))
}

#[test]
fn failures_exit_non_zero_with_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["baseline", "--model", "toy:giant", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let body = error_body(&o);
    assert_eq!(body["error"]["kind"], "invalid_argument");
    assert_eq!(body["error"]["command"], "baseline");
    assert!(body["error"]["message"].as_str().unwrap().contains("toy:giant"));

    let o = bin()
        .args(["discover", "--threshold", "1.5", "--n", "10", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "domain");

    let o = bin().args(["intervene", "--edge", "L1.MLP->L0.H0[value]", "--n", "5", "--out-dir"]).arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_body(&o)["error"]["kind"], "invalid_argument");

    let o = bin().args(["no-such-command"]).output().unwrap();
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn spilled_means_are_reused_across_runs() {
    let (cache, a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["robustness", "--model", "toy:student-low", "--n", "30", "--resamples", "500"];
    let run = |out: &Path| {
        let o = bin().env(CACHE_ENV, cache.path()).args(args).arg("--out-dir").arg(out).output().unwrap();
        assert!(o.status.success(), "{}", text(&o.stderr));
    };
    let spilled = || -> Vec<(PathBuf, std::time::SystemTime)> {
        let mut v: Vec<_> = std::fs::read_dir(cache.path())
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.path(), e.metadata().unwrap().modified().unwrap()))
            .collect();
        v.sort();
        v
    };
    run(a.path());
    let first = spilled();
    assert_eq!(first.len(), 1, "{first:?}");
    assert!(first[0].0.file_name().unwrap().to_string_lossy().starts_with("means-"));
    run(b.path());
    assert_eq!(spilled(), first, "cache file was rewritten");

    let strip = |v: Value| without(v, &["timestamp"]);
    let read = |d: &Path| strip(json(&d.join("robustness/robustness.json")));
    assert_eq!(read(a.path()), read(b.path()));

    let uncached = tempfile::tempdir().unwrap();
    run_ok(&args, uncached.path());
    assert_eq!(read(uncached.path()), read(a.path()));
}

#[test]
fn toy_export_writes_verifiable_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_ok(&["toy-export"], dir.path());
    let root = manifest.parent().unwrap();
    for name in ["toy_teacher", "toy_student_high", "toy_student_medium", "toy_student_low"] {
        assert_eq!(verify_checksums(&root.join(name)).unwrap().len(), 5);
        let m = ModelBundle::load_dir(&root.join(name)).unwrap();
        assert_eq!(m.name, name);
    }
}

#[test]
fn sequential_flag_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ok(&["baseline", "--model", "toy:student-high", "--n", "25"], a.path());
    run_ok(&["baseline", "--model", "toy:student-high", "--n", "25", "--sequential"], b.path());
    let csv = |d: &Path| {
        let body = std::fs::read_to_string(d.join("baseline/baseline.csv")).unwrap();
        body.lines().skip(1).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(csv(a.path()), csv(b.path()));
}
