//! Experiment orchestration: one manifest drives teacher training, dump
//! extraction, similarity matrices, pruning sweeps and mimic sweeps, and
//! every stage writes plain CSV/JSON artifacts into one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::activation::{read_dump_file, write_dump_file, ActivationDump};
use crate::error::{Error, Result};
use crate::mimic::{compare, write_comparison_csv, CompareOptions, ComparisonRow, MimicConfig};
use crate::model::data::DEFAULT_NOISE;
use crate::model::train::{train, Objective, TrainOptions};
use crate::model::{evaluate, generate_splits, hex_digest, SynthDataset, ToyConfig, ToyTransformer};
use crate::numfmt;
use crate::pruning::{
    block_influence, detect_blocks, prune_order, repeated_retention, retention_curve, Heuristic, RetentionCurve,
};
use crate::rng::subseed;
use crate::similarity::{similarity_matrix, Metric, DEFAULT_K};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER_STEM: &str = "teacher";
pub const DUMP_FILE: &str = "activations.rsd";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub noise: f64,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 32768,
            validation: 512,
            test: 1024,
            noise: DEFAULT_NOISE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSettings {
    pub heuristics: Vec<Heuristic>,
    /// Repeated evaluations on random test subsets for error bars.
    pub repeats: usize,
    pub repeat_size: usize,
}

impl Default for PruneSettings {
    fn default() -> Self {
        PruneSettings {
            heuristics: Heuristic::ALL.to_vec(),
            repeats: 5,
            repeat_size: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimicSettings {
    pub configs: Vec<MimicConfig>,
    /// Training samples used by mimic and adaptation phases.
    pub train_samples: usize,
    pub mimic: TrainOptions,
    pub adaptation: TrainOptions,
    pub warmup_steps: usize,
    pub timing_samples: usize,
}

impl Default for MimicSettings {
    fn default() -> Self {
        use crate::mimic::MimicLayerType::{LinearMimic, Transformer};
        let base = CompareOptions::default();
        MimicSettings {
            configs: vec![
                MimicConfig::new(LinearMimic, 1, 64, true),
                MimicConfig::new(LinearMimic, 1, 64, false),
                MimicConfig::new(LinearMimic, 2, 64, true),
                MimicConfig::new(Transformer, 1, 64, true),
                MimicConfig::new(Transformer, 1, 64, false),
                MimicConfig::new(Transformer, 2, 64, true),
            ],
            train_samples: 2048,
            mimic: base.mimic,
            adaptation: base.adaptation,
            warmup_steps: base.warmup_steps,
            timing_samples: base.timing_samples,
        }
    }
}

/// A sweep file: the mimic configurations to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicSweep {
    pub configs: Vec<MimicConfig>,
}

impl MimicSweep {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(Error::at_path(path))?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub seed: u64,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub data: DataSizes,
    #[serde(default = "default_teacher_training")]
    pub teacher: TrainOptions,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub pruning: PruneSettings,
    #[serde(default)]
    pub mimic: MimicSettings,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_teacher_training() -> TrainOptions {
    TrainOptions {
        epochs: 4,
        eval_every: 256,
        ..TrainOptions::default()
    }
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentManifest {
    pub fn new(seed: u64) -> Self {
        ExperimentManifest {
            seed,
            toy: ToyConfig::default(),
            data: DataSizes::default(),
            teacher: default_teacher_training(),
            metrics: default_metrics(),
            k: DEFAULT_K,
            pruning: PruneSettings::default(),
            mimic: MimicSettings::default(),
            out_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ExperimentManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(Error::at_path(path))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_json()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        let classes = self.toy.classes;
        for (name, m) in [
            ("train", self.data.train),
            ("validation", self.data.validation),
            ("test", self.data.test),
        ] {
            if m < classes {
                return Err(Error::Config(format!("{name} split needs at least {classes} samples, got {m}")));
            }
        }
        if self.k == 0 || self.k >= self.data.validation {
            return Err(Error::Parameter(format!(
                "k={} must lie in 1..{} (validation samples)",
                self.k, self.data.validation
            )));
        }
        for c in &self.mimic.configs {
            c.validate(self.toy.num_blocks)?;
        }
        Ok(())
    }

    /// The toy config with the manifest seed applied.
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            seed: self.seed,
            ..self.toy
        }
    }

    pub fn datasets(&self) -> [SynthDataset; 3] {
        generate_splits(
            &self.toy_config(),
            [self.data.train, self.data.validation, self.data.test],
            self.data.noise,
        )
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn record(&self) -> Result<()> {
        write_text(&self.artifact(MANIFEST_FILE), &self.to_json()?)
    }

    fn require_out_dir(&self) -> Result<()> {
        if self.out_dir.is_dir() {
            Ok(())
        } else {
            Err(Error::Path {
                path: self.out_dir.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            })
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::at_path(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_csv_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(Error::at_path(path))
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub accuracy: f64,
    pub std_error: f64,
    pub mean_nll: f64,
    pub num_samples: usize,
    pub num_params: usize,
    pub weights_hash: String,
    pub best_step: usize,
    pub best_validation: f64,
    pub steps: usize,
    pub train_seconds: f64,
}

/// Trains the teacher and writes its checkpoint, loss trace and metrics.
pub fn cmd_train_teacher(manifest: &ExperimentManifest) -> Result<TeacherReport> {
    manifest.validate()?;
    manifest.require_out_dir()?;
    manifest.record()?;
    let [train_data, validation, test] = manifest.datasets();
    let mut model = ToyTransformer::new(manifest.toy_config())?;
    let opts = TrainOptions {
        seed: subseed(manifest.seed, "teacher/train"),
        ..manifest.teacher.clone()
    };
    let start = Instant::now();
    let trace = train(&mut model, &train_data, &validation, &Objective::Nll, &opts)?;
    let train_seconds = start.elapsed().as_secs_f64();
    model.save(&manifest.out_dir, TEACHER_STEM)?;
    let eval = evaluate(&model, &test);
    let report = TeacherReport {
        accuracy: eval.accuracy,
        std_error: eval.std_error,
        mean_nll: eval.mean_nll,
        num_samples: eval.num_samples,
        num_params: crate::model::Predictor::count_params(&model),
        weights_hash: model.weights_hash(),
        best_step: trace.best_step,
        best_validation: trace.best_validation,
        steps: trace.steps(),
        train_seconds,
    };
    write_json(&manifest.artifact("teacher_trace.json"), &trace)?;
    write_json(&manifest.artifact("teacher_metrics.json"), &report)?;
    Ok(report)
}

pub fn load_teacher(manifest: &ExperimentManifest) -> Result<ToyTransformer> {
    ToyTransformer::load(&manifest.out_dir, TEACHER_STEM)
}

/// Dumps the teacher's pooled block outputs on the validation split.
pub fn cmd_extract(manifest: &ExperimentManifest) -> Result<ActivationDump> {
    manifest.validate()?;
    manifest.require_out_dir()?;
    let teacher = load_teacher(manifest)?;
    let [_, validation, _] = manifest.datasets();
    let dump = teacher.forward_with_activations(&validation)?;
    write_dump_file(&dump, &manifest.artifact(DUMP_FILE))?;
    Ok(dump)
}

/// Similarity matrices of a dump as CSV and JSON, plus the detected split
/// per metric in `blocks.json`.
pub fn cmd_similarity(dump_path: &Path, metrics: &[Metric], k: usize, out_dir: &Path) -> Result<BTreeMap<String, usize>> {
    let dump = read_dump_file(dump_path)?;
    let mut splits = BTreeMap::new();
    for &metric in metrics {
        let s = similarity_matrix(&dump, metric, Some(k))?;
        let name = metric.to_string();
        write_csv_with(&out_dir.join(format!("similarity_{name}.csv")), |b| s.write_csv(b))?;
        write_text(&out_dir.join(format!("similarity_{name}.json")), &(s.to_json()? + "\n"))?;
        if dump.num_layers() >= 3 {
            splits.insert(name, detect_blocks(&s)?);
        }
    }
    write_json(&out_dir.join("blocks.json"), &splits)?;
    Ok(splits)
}

pub fn cmd_similarity_manifest(manifest: &ExperimentManifest) -> Result<BTreeMap<String, usize>> {
    manifest.validate()?;
    cmd_similarity(&manifest.artifact(DUMP_FILE), &manifest.metrics, manifest.k, &manifest.out_dir)
}

/// Plans and retention curves for every configured heuristic.
pub fn cmd_prune(
    teacher: &ToyTransformer,
    dump: &ActivationDump,
    eval_data: &SynthDataset,
    settings: &PruneSettings,
    k: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<RetentionCurve>> {
    let mut curves = Vec::new();
    for &h in &settings.heuristics {
        let bi = match h.bi_variant() {
            Some(v) => Some(block_influence(dump, v, Some(k))?),
            None => None,
        };
        let plan = prune_order(h, bi.as_ref(), teacher.config.num_blocks)?;
        let name = h.name();
        if let Some(bi) = &bi {
            write_json(&out_dir.join(format!("influence_{name}.json")), bi)?;
        }
        write_text(&out_dir.join(format!("plan_{name}.json")), &(plan.to_json()? + "\n"))?;
        let curve = retention_curve(teacher, &plan, eval_data)?;
        write_csv_with(&out_dir.join(format!("retention_{name}.csv")), |b| curve.write_csv(b))?;
        if settings.repeats > 0 {
            let runs = repeated_retention(
                teacher,
                &plan,
                eval_data,
                settings.repeats,
                settings.repeat_size,
                subseed(seed, &format!("prune/{name}")),
            )?;
            write_csv_with(&out_dir.join(format!("retention_{name}_repeats.csv")), |b| {
                write_repeats_csv(&runs, b)
            })?;
        }
        curves.push(curve);
    }
    Ok(curves)
}

/// Mean accuracy and standard error of the mean per prefix length.
fn write_repeats_csv(runs: &[RetentionCurve], out: &mut Vec<u8>) -> Result<()> {
    use std::io::Write;
    writeln!(out, "num_pruned,fraction_pruned,mean_accuracy,std_error,runs")?;
    let Some(first) = runs.first() else {
        return Ok(());
    };
    let n = runs.len() as f64;
    for (i, p) in first.points.iter().enumerate() {
        let accs: Vec<f64> = runs.iter().map(|r| r.points[i].accuracy).collect();
        let mean = accs.iter().sum::<f64>() / n;
        let se = if runs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        writeln!(
            out,
            "{},{},{},{},{}",
            p.num_pruned,
            numfmt::significant(p.num_pruned as f64 / first.num_blocks as f64, 9),
            numfmt::significant(mean, 9),
            numfmt::significant(se, 9),
            runs.len()
        )?;
    }
    Ok(())
}

pub fn cmd_prune_manifest(manifest: &ExperimentManifest) -> Result<Vec<RetentionCurve>> {
    manifest.validate()?;
    let teacher = load_teacher(manifest)?;
    let dump = read_dump_file(&manifest.artifact(DUMP_FILE))?;
    let [_, _, test] = manifest.datasets();
    cmd_prune(
        &teacher,
        &dump,
        &test,
        &manifest.pruning,
        manifest.k,
        manifest.seed,
        &manifest.out_dir,
    )
}

/// Mimic comparison table, rows sorted by parameter count (largest first).
pub fn cmd_mimic(manifest: &ExperimentManifest, sweep: Option<&MimicSweep>) -> Result<Vec<ComparisonRow>> {
    manifest.validate()?;
    manifest.require_out_dir()?;
    let teacher = load_teacher(manifest)?;
    let configs = sweep.map(|s| s.configs.as_slice()).unwrap_or(&manifest.mimic.configs);
    for c in configs {
        c.validate(teacher.num_blocks())?;
    }
    let [train_data, validation, test] = manifest.datasets();
    let train_data = train_data.truncated(manifest.mimic.train_samples);
    let opts = CompareOptions {
        mimic: manifest.mimic.mimic.clone(),
        adaptation: manifest.mimic.adaptation.clone(),
        warmup_steps: manifest.mimic.warmup_steps,
        timing_samples: manifest.mimic.timing_samples,
        seed: subseed(manifest.seed, "mimic"),
    };
    let mut rows = compare(&teacher, configs, &train_data, &validation, &test, &opts)?;
    rows.sort_by_key(|r| std::cmp::Reverse(r.num_params));
    write_csv_with(&manifest.artifact("comparison.csv"), |b| write_comparison_csv(&rows, b))?;
    write_json(&manifest.artifact("comparison.json"), &rows)?;
    Ok(rows)
}

/// Files every complete run must contain.
pub fn expected_artifacts(manifest: &ExperimentManifest) -> Vec<String> {
    let mut names = vec![
        MANIFEST_FILE.to_string(),
        format!("{TEACHER_STEM}.bin"),
        format!("{TEACHER_STEM}.json"),
        "teacher_metrics.json".into(),
        "teacher_trace.json".into(),
        DUMP_FILE.into(),
        "blocks.json".into(),
    ];
    for m in &manifest.metrics {
        names.push(format!("similarity_{m}.csv"));
        names.push(format!("similarity_{m}.json"));
    }
    for h in &manifest.pruning.heuristics {
        names.push(format!("plan_{}.json", h.name()));
        names.push(format!("retention_{}.csv", h.name()));
    }
    names.push("comparison.csv".into());
    names.push("comparison.json".into());
    names
}

/// Bundles every artifact of the run into `report.json`. Text artifacts are
/// embedded (JSON parsed, CSV verbatim), binaries by hash. Missing files are
/// listed in the bundle and reported as an error.
pub fn cmd_report(out_dir: &Path) -> Result<Value> {
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        Some(ExperimentManifest::load(&manifest_path)?)
    } else {
        None
    };
    let expected = match &manifest {
        Some(m) => expected_artifacts(m),
        None => expected_artifacts(&ExperimentManifest::new(0)),
    };
    let mut present: Vec<String> = Vec::new();
    for entry in fs::read_dir(out_dir).map_err(Error::at_path(out_dir))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name != REPORT_FILE {
            present.push(name);
        }
    }
    present.sort();
    let missing: Vec<String> = expected.iter().filter(|n| !present.contains(n)).cloned().collect();

    let mut artifacts = serde_json::Map::new();
    for name in &present {
        let path = out_dir.join(name);
        if !path.is_file() {
            continue;
        }
        let bytes = fs::read(&path).map_err(Error::at_path(&path))?;
        let sha256 = hex_digest(&bytes);
        let entry = if name.ends_with(".json") {
            json!({ "sha256": sha256, "content": serde_json::from_slice::<Value>(&bytes)? })
        } else if name.ends_with(".csv") {
            json!({ "sha256": sha256, "content": String::from_utf8_lossy(&bytes) })
        } else {
            json!({ "sha256": sha256, "bytes": bytes.len() })
        };
        artifacts.insert(name.clone(), entry);
    }
    let bundle = json!({
        "manifest_hash": manifest.as_ref().map(|m| m.hash()).transpose()?,
        "missing": missing,
        "artifacts": artifacts,
    });
    write_json(&out_dir.join(REPORT_FILE), &bundle)?;
    if missing.is_empty() {
        Ok(bundle)
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

/// Runs every stage in order and bundles the report.
pub fn run_all(manifest: &ExperimentManifest) -> Result<Value> {
    cmd_train_teacher(manifest)?;
    cmd_extract(manifest)?;
    cmd_similarity_manifest(manifest)?;
    cmd_prune_manifest(manifest)?;
    cmd_mimic(manifest, None)?;
    cmd_report(&manifest.out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_requires_seed() {
        assert!(ExperimentManifest::from_json("{}").is_err());
        let m = ExperimentManifest::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(m, ExperimentManifest::new(4));
    }

    #[test]
    fn manifest_roundtrip_and_hash() {
        let m = ExperimentManifest::new(7);
        let back = ExperimentManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash().unwrap(), m.hash().unwrap());
        assert_ne!(ExperimentManifest::new(8).hash().unwrap(), m.hash().unwrap());
    }

    #[test]
    fn k_must_fit_validation_split() {
        let mut m = ExperimentManifest::new(1);
        m.k = m.data.validation;
        assert!(matches!(m.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn missing_output_dir_is_io_error() {
        let mut m = ExperimentManifest::new(1);
        m.out_dir = PathBuf::from("/nonexistent/stack-redundancy/out");
        let err = cmd_train_teacher(&m).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Io);
    }

    #[test]
    fn report_lists_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ExperimentManifest::new(2);
        m.out_dir = dir.path().to_path_buf();
        m.record().unwrap();
        fs::write(dir.path().join("comparison.csv"), "a,b\n1,2\n").unwrap();
        let err = cmd_report(dir.path()).unwrap_err();
        let Error::MissingArtifacts(missing) = err else {
            panic!("unexpected {err:?}");
        };
        assert!(missing.contains(&"teacher.bin".to_string()));
        assert!(!missing.contains(&"comparison.csv".to_string()));
        let first = fs::read(dir.path().join(REPORT_FILE)).unwrap();
        let _ = cmd_report(dir.path());
        assert_eq!(fs::read(dir.path().join(REPORT_FILE)).unwrap(), first);
    }
}
