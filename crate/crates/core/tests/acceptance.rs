//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stack_redundancy::activation::center;
use stack_redundancy::mimic::{ComparisonRow, MimicConfig, MimicLayerType, NetworkType};
use stack_redundancy::model::gradcheck::sublayer_suite;
use stack_redundancy::model::{Predictor, ToyConfig};
use stack_redundancy::parallel;
use stack_redundancy::pipeline::{
    cmd_extract, cmd_mimic, cmd_prune_manifest, cmd_similarity_manifest, cmd_train_teacher, load_teacher, run_all,
    ExperimentManifest, TeacherReport,
};
use stack_redundancy::pruning::{apply_prune, Heuristic, RetentionCurve};
use stack_redundancy::similarity::{cka, cosine_similarity, mutual_knn, similarity_matrix, Metric};
use stack_redundancy::ActivationDump;

const SEED: u64 = 0;
const TOL: f64 = 1e-9;
const TEACHER_BUDGET_SECONDS: f64 = 600.0;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {name}: {detail} [{secs:.1}s]");
    outcome.is_ok()
}

// ---------------------------------------------------------------------------
// Property criteria

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(4..=16);
        let (d1, d2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_matrix(&mut rng, n, d1);
        let b = random_matrix(&mut rng, n, d2);
        let (ca, cb) = (center(a.view()), center(b.view()));
        let (na, nb) = (naive_center(&rows(&a)), naive_center(&rows(&b)));
        let k = rng.random_range(1..n);
        let b_same = random_matrix(&mut rng, n, d1);
        let nbs = naive_center(&rows(&b_same));
        worst = worst
            .max((cosine_similarity(&ca, &center(b_same.view())).unwrap() - oracle_cosine(&na, &nbs)).abs())
            .max((cka(&ca, &cb).unwrap() - oracle_cka(&na, &nb)).abs())
            .max((mutual_knn(&ca, &cb, k).unwrap() - oracle_mutual_knn(&na, &nb, k)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < TOL && secs < 5.0, format!("max deviation {worst:.2e}, {secs:.3}s"))
}

fn invariances() -> Check {
    let mut worst: f64 = 0.0;
    let mut knn_exact = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(9..20);
        let d = rng.random_range(1..8);
        let k = rng.random_range(1..8);
        let c = rng.random_range(0.01..100.0);
        let a = seeded_matrix(seed, n, d);
        let b = seeded_matrix(seed + 1000, n, d);
        let q = orthogonal(seed, d);
        let (ca, cb) = (center(a.view()), center(b.view()));
        let (caq, cbq) = (center(a.dot(&q).view()), center(b.dot(&q).view()));
        let cbs = center((&b * c).view());
        let cos = cosine_similarity(&ca, &cb).unwrap();
        let lin = cka(&ca, &cb).unwrap();
        let knn = mutual_knn(&ca, &cb, k).unwrap();
        worst = worst
            .max((cosine_similarity(&caq, &cbq).unwrap() - cos).abs())
            .max((cosine_similarity(&ca, &cbs).unwrap() - cos).abs())
            .max((cka(&ca, &cbq).unwrap() - lin).abs())
            .max((cka(&ca, &cbs).unwrap() - lin).abs());
        knn_exact &= mutual_knn(&ca, &cbq, k).unwrap() == knn && mutual_knn(&ca, &cbs, k).unwrap() == knn;

        let layers: Vec<Array2<f64>> = (0..4).map(|i| seeded_matrix(seed * 7 + i, n, d)).collect();
        let dump = ActivationDump::new(layers, None, None).unwrap();
        for metric in Metric::ALL {
            let s = similarity_matrix(&dump, metric, Some(k.min(n - 1))).unwrap();
            for i in 0..4 {
                worst = worst.max((s.get(i, i) - 1.0).abs());
                for j in 0..4 {
                    worst = worst.max((s.get(i, j) - s.get(j, i)).abs());
                }
            }
        }
    }
    ensure(
        worst < TOL && knn_exact,
        format!("max deviation {worst:.2e}, mutual kNN exact: {knn_exact}"),
    )
}

fn gradients() -> Check {
    let mut worst = (0.0, "", 0);
    for seed in 0..10 {
        for (name, report) in sublayer_suite(seed) {
            if report.max_error() >= worst.0 {
                worst = (report.max_error(), name, seed);
            }
        }
    }
    ensure(
        worst.0 < 1e-3,
        format!("worst relative error {:.2e} ({} seed {})", worst.0, worst.1, worst.2),
    )
}

// ---------------------------------------------------------------------------
// Default pipeline criteria

struct DefaultRun {
    manifest: ExperimentManifest,
    teacher: TeacherReport,
    splits: std::collections::BTreeMap<String, usize>,
    curves: Vec<RetentionCurve>,
    rows: Vec<ComparisonRow>,
}

fn manifest_in(seed: u64, dir: &Path) -> ExperimentManifest {
    let mut m = ExperimentManifest::new(seed);
    m.out_dir = dir.to_path_buf();
    m
}

fn default_run(dir: &Path) -> DefaultRun {
    let manifest = manifest_in(SEED, dir);
    let teacher = parallel::sequential(|| cmd_train_teacher(&manifest)).expect("teacher training");
    cmd_extract(&manifest).expect("extract");
    let splits = cmd_similarity_manifest(&manifest).expect("similarity");
    let curves = cmd_prune_manifest(&manifest).expect("prune");
    let rows = cmd_mimic(&manifest, None).expect("mimic");
    DefaultRun {
        manifest,
        teacher,
        splits,
        curves,
        rows,
    }
}

fn teacher_quality(run: &DefaultRun) -> Check {
    let t = &run.teacher;
    ensure(
        t.accuracy >= 0.95 && t.train_seconds <= TEACHER_BUDGET_SECONDS,
        format!(
            "test accuracy {:.4} (>= 0.95), single-threaded training {:.0}s (<= {TEACHER_BUDGET_SECONDS:.0}s)",
            t.accuracy, t.train_seconds
        ),
    )
}

fn stitching_identity(run: &DefaultRun) -> Check {
    let model = load_teacher(&run.manifest).map_err(|e| e.to_string())?;
    let stitched = apply_prune(&model, &BTreeSet::new()).map_err(|e| e.to_string())?;
    let cfg = model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identical = 0;
    for _ in 0..100 {
        let x = Array2::from_shape_simple_fn((cfg.frames, cfg.input_dim), || rng.random_range(-2.0..2.0));
        if model.forward(x.view()).unwrap() == stitched.forward(x.view()).unwrap() {
            identical += 1;
        }
    }
    ensure(identical == 100, format!("{identical}/100 inputs bit-identical"))
}

fn curve(run: &DefaultRun, h: Heuristic) -> &RetentionCurve {
    run.curves.iter().find(|c| c.heuristic == h).expect("curve for heuristic")
}

fn chance_collapse(run: &DefaultRun) -> Check {
    let c = curve(run, Heuristic::Forward);
    let last = c.points.last().unwrap();
    ensure(
        (last.accuracy - c.chance_level).abs() <= 0.05,
        format!(
            "accuracy with blocks 2..{} deleted {:.4}, chance {:.4}",
            c.num_blocks, last.accuracy, c.chance_level
        ),
    )
}

/// Largest BI or kNN-BI prefix deletable at 95% retention.
fn deletable_at_95(curves: &[RetentionCurve]) -> usize {
    curves
        .iter()
        .filter(|c| matches!(c.heuristic, Heuristic::Bi | Heuristic::KnnBi))
        .map(|c| c.max_pruned_at(0.95))
        .max()
        .unwrap_or(0)
}

fn redundancy(run: &DefaultRun, scratch: &Path) -> Check {
    let l = run.manifest.toy.num_blocks;
    let needed = (l as f64 * 0.25).ceil() as usize;
    let mut counts = vec![deletable_at_95(&run.curves)];
    for seed in [SEED + 1, SEED + 2] {
        let dir = scratch.join(format!("seed{seed}"));
        fs::create_dir_all(&dir).unwrap();
        let m = manifest_in(seed, &dir);
        cmd_train_teacher(&m).map_err(|e| e.to_string())?;
        cmd_extract(&m).map_err(|e| e.to_string())?;
        counts.push(deletable_at_95(&cmd_prune_manifest(&m).map_err(|e| e.to_string())?));
    }
    let passing = counts.iter().filter(|&&c| c >= needed).count();
    ensure(
        passing >= 2,
        format!("blocks deletable at 95% retention per seed {counts:?} of {l}, need {needed} on 2 of 3 seeds"),
    )
}

fn criticality(run: &DefaultRun) -> Check {
    let split = run.splits[&Metric::MutualKnn.to_string()];
    let c = curve(run, Heuristic::Backward);
    let limit = c.num_blocks - split + 1;
    let first_below = c
        .points
        .iter()
        .find(|p| c.retention(p.num_pruned).unwrap() < 0.5)
        .map(|p| p.num_pruned);
    ensure(
        first_below.is_some_and(|n| n <= limit),
        format!("split after block {split}, retention below 50% at {first_below:?} deletions (limit {limit})"),
    )
}

fn mimic_reduction(run: &DefaultRun) -> Check {
    let original = run.rows.iter().find(|r| r.network_type == NetworkType::Original).unwrap();
    let candidates: Vec<&ComparisonRow> = run
        .rows
        .iter()
        .filter(|r| matches!(r.network_type, NetworkType::Mimicker | NetworkType::NonMimicker))
        .collect();
    let passes = |r: &ComparisonRow| {
        r.accuracy >= 0.9 * original.accuracy && r.param_reduction(original.num_params) >= 0.7 && r.normalized_time < 0.5
    };
    let most_accurate = candidates.iter().copied().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy));
    let Some(r) = candidates.iter().copied().find(|r| passes(r)).or(most_accurate) else {
        return Err("no mimic rows".into());
    };
    ensure(
        passes(r),
        format!(
            "{} {} x{} z={:?}: accuracy {:.4} vs teacher {:.4}, {:.1}% fewer params, normalized time {:.3}",
            r.network_type,
            r.layer_type.as_deref().unwrap_or("-"),
            r.num_layers,
            r.z,
            r.accuracy,
            original.accuracy,
            100.0 * r.param_reduction(original.num_params),
            r.normalized_time
        ),
    )
}

fn baseline_ordering(run: &DefaultRun) -> Check {
    let baseline = run.rows.iter().find(|r| r.network_type == NetworkType::ClassifierOnly).unwrap();
    let one_layer: Vec<f64> = run
        .rows
        .iter()
        .filter(|r| matches!(r.network_type, NetworkType::Mimicker | NetworkType::NonMimicker) && r.num_layers == 1)
        .map(|r| r.accuracy)
        .collect();
    let lowest = one_layer.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        !one_layer.is_empty() && baseline.accuracy < lowest,
        format!(
            "classifier-only {:.4} vs lowest 1-layer mimic {:.4} ({} rows)",
            baseline.accuracy,
            lowest,
            one_layer.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Determinism

fn reduced_manifest(dir: &Path) -> ExperimentManifest {
    let mut m = manifest_in(11, dir);
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
    m.data.train = 512;
    m.data.validation = 96;
    m.data.test = 128;
    m.teacher.epochs = 2;
    m.k = 4;
    m.pruning.repeats = 2;
    m.pruning.repeat_size = 64;
    m.mimic.configs = vec![
        MimicConfig::new(MimicLayerType::LinearMimic, 1, 8, true),
        MimicConfig::new(MimicLayerType::Transformer, 1, 8, false),
    ];
    m.mimic.train_samples = 256;
    m.mimic.mimic.epochs = 2;
    m.mimic.adaptation.epochs = 2;
    m.mimic.timing_samples = 8;
    m
}

/// Every CSV in `dir`, with the wall-clock column of the comparison table masked.
fn csv_snapshot(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if !name.ends_with(".csv") {
            continue;
        }
        let text = fs::read_to_string(&path).unwrap();
        let text = if name == "comparison.csv" { mask_timing(&text) } else { text };
        out.push((name, text));
    }
    out.sort();
    out
}

fn mask_timing(text: &str) -> String {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header.split(',').position(|c| c == "inference_time_normalized");
    let mut out = format!("{header}\n");
    for line in lines {
        let cells: Vec<&str> = line
            .split(',')
            .enumerate()
            .map(|(i, c)| if Some(i) == col { "*" } else { c })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn determinism(scratch: &Path) -> Check {
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let dir = scratch.join(run);
        fs::create_dir_all(&dir).unwrap();
        run_all(&reduced_manifest(&dir)).map_err(|e| e.to_string())?;
        snapshots.push(csv_snapshot(&dir));
    }
    let names: Vec<&str> = snapshots[0].iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = snapshots[0]
        .iter()
        .zip(&snapshots[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    ensure(
        snapshots[0].len() == snapshots[1].len() && differing.is_empty() && !names.is_empty(),
        format!("{} CSV files compared, differing: {differing:?}", names.len()),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut passed = Vec::new();
    passed.push(run("metric oracle equivalence", metric_oracles));
    passed.push(run("invariance suite", invariances));
    passed.push(run("gradient checks", gradients));

    let default_dir = scratch.path().join("default");
    fs::create_dir_all(&default_dir).unwrap();
    let default = panic::catch_unwind(AssertUnwindSafe(|| default_run(&default_dir)));
    match &default {
        Ok(run_) => {
            passed.push(run("teacher quality", || teacher_quality(run_)));
            passed.push(run("stitching identity", || stitching_identity(run_)));
            passed.push(run("chance collapse", || chance_collapse(run_)));
            passed.push(run("redundancy", || redundancy(run_, scratch.path())));
            passed.push(run("block criticality", || criticality(run_)));
            passed.push(run("mimic reduction", || mimic_reduction(run_)));
            passed.push(run("baseline ordering", || baseline_ordering(run_)));
        }
        Err(_) => {
            for name in [
                "teacher quality",
                "stitching identity",
                "chance collapse",
                "redundancy",
                "block criticality",
                "mimic reduction",
                "baseline ordering",
            ] {
                passed.push(run(name, || Err("default pipeline run failed".into())));
            }
        }
    }
    passed.push(run("determinism", || determinism(&scratch.path().join("determinism"))));

    let failures = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failures, passed.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
