//! Runs the `stackred` binary end to end on a small manifest.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use serde_json::Value;
use stack_redundancy::activation::write_dump_file;
use stack_redundancy::mimic::{MimicConfig, MimicLayerType};
use stack_redundancy::model::ToyConfig;
use stack_redundancy::pipeline::ExperimentManifest;
use stack_redundancy::ActivationDump;

fn stackred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackred")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_manifest(dir: &Path) -> ExperimentManifest {
    let mut m = ExperimentManifest::new(3);
    m.out_dir = dir.to_path_buf();
    m.toy = ToyConfig {
        num_blocks: 4,
        dim: 16,
        heads: 2,
        ff_dim: 32,
        frames: 16,
        input_dim: 4,
        classes: 4,
        seed: 0,
    };
    m.data.train = 256;
    m.data.validation = 64;
    m.data.test = 64;
    m.teacher.epochs = 1;
    m.k = 4;
    m.pruning.repeats = 2;
    m.pruning.repeat_size = 32;
    m.mimic.configs = vec![MimicConfig::new(MimicLayerType::LinearMimic, 1, 8, true)];
    m.mimic.train_samples = 128;
    m.mimic.mimic.epochs = 1;
    m.mimic.adaptation.epochs = 1;
    m.mimic.timing_samples = 4;
    m
}

fn write_manifest(m: &ExperimentManifest, path: &Path) -> String {
    fs::write(path, m.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn seed_is_required() {
    let out = stackred(&["train-teacher", "--out", "/tmp"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_output_directory_is_io_failure() {
    let out = stackred(&["train-teacher", "--seed", "1", "--out", "/nonexistent/stackred/run"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn similarity_of_identical_layers_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let layer = Array2::from_shape_fn((10, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - (i as f64) * 0.3);
    let dump = ActivationDump::new(vec![layer.clone(), layer.clone(), layer], None, None).unwrap();
    let dump_path = dir.path().join("same.rsd");
    write_dump_file(&dump, &dump_path).unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let dump_arg = dump_path.to_str().unwrap();

    let out = stackred(&["similarity", "--seed", "1", "--out", out_dir, "--dump", dump_arg, "--k", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for metric in ["cosine", "cka", "mutual_knn"] {
        let csv = fs::read_to_string(dir.path().join(format!("similarity_{metric}.csv"))).unwrap();
        let values: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(values.len(), 9, "{metric}: {csv}");
        assert!(values.iter().all(|v| (v - 1.0).abs() < 1e-9), "{metric}: {csv}");
    }

    let out = stackred(&["similarity", "--seed", "1", "--out", out_dir, "--dump", dump_arg, "--k", "10"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains('k'));
}

#[test]
fn report_of_incomplete_run_lists_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = stackred(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 5);
    let bundle = read_json(&dir.path().join("report.json"));
    assert!(bundle["missing"].as_array().unwrap().iter().any(|v| v == "teacher.bin"));
}

#[test]
fn full_run_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    fs::create_dir(&run_dir).unwrap();
    let manifest = write_manifest(&small_manifest(&run_dir), &dir.path().join("manifest.json"));

    let out = stackred(&["run", "--manifest", &manifest]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = read_json(&run_dir.join("report.json"));
    assert!(bundle["missing"].as_array().unwrap().is_empty());
    assert!(bundle["manifest_hash"].is_string());

    let metrics = read_json(&run_dir.join("teacher_metrics.json"));
    for h in ["forward", "backward", "bi", "knn_bi"] {
        let csv = fs::read_to_string(run_dir.join(format!("retention_{h}.csv"))).unwrap();
        let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        let acc: f64 = first[2].parse().unwrap();
        assert!((acc - metrics["accuracy"].as_f64().unwrap()).abs() < 1e-9, "{h}");
    }

    let out = stackred(&["train-teacher", "--manifest", &manifest]);
    assert_eq!(code(&out), 0);
    let again = read_json(&run_dir.join("teacher_metrics.json"));
    assert_eq!(again["weights_hash"], metrics["weights_hash"]);

    assert_eq!(code(&stackred(&["report", "--manifest", &manifest])), 0);
    let report = fs::read(run_dir.join("report.json")).unwrap();
    assert_eq!(code(&stackred(&["report", "--manifest", &manifest])), 0);
    assert_eq!(fs::read(run_dir.join("report.json")).unwrap(), report);

    let sweep = dir.path().join("empty_sweep.json");
    fs::write(&sweep, r#"{"configs": []}"#).unwrap();
    let out = stackred(&["mimic", "--manifest", &manifest, "--sweep", sweep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(run_dir.join("comparison.csv")).unwrap();
    let kinds: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds, vec!["Original", "ClassifierOnly"]);
}
