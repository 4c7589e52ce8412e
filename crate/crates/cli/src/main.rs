use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stack_redundancy::error::ErrorKind;
use stack_redundancy::pipeline::{self, ExperimentManifest, MimicSweep};
use stack_redundancy::pruning::Heuristic;
use stack_redundancy::similarity::Metric;
use stack_redundancy::{Error, Result};

const EXIT_VALIDATION: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_IO: u8 = 5;

#[derive(Parser)]
#[command(name = "stackred", version, about = "Depth redundancy analysis for transformer stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment manifest (JSON). Without it, defaults are used and --seed is required.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the manifest output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy teacher and write its checkpoint and metrics.
    TrainTeacher(Common),
    /// Dump pooled block outputs of the teacher on the validation split.
    Extract(Common),
    /// Similarity matrices of an activation dump.
    Similarity {
        #[command(flatten)]
        common: Common,
        /// Dump to analyse (defaults to the run's own dump).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Metrics to compute (defaults to the manifest list).
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<Metric>,
        /// Neighbourhood size for mutual kNN.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pruning plans and retention curves.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Heuristics to run (defaults to the manifest list).
        #[arg(long, value_delimiter = ',')]
        heuristics: Vec<Heuristic>,
    },
    /// Train and compare mimicking networks.
    Mimic {
        #[command(flatten)]
        common: Common,
        /// Sweep file with the mimic configurations (defaults to the manifest sweep).
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Bundle all artifacts of a run into report.json.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
}

fn manifest(common: &Common) -> Result<ExperimentManifest> {
    let mut m = match (&common.manifest, common.seed) {
        (Some(path), _) => ExperimentManifest::load(path)?,
        (None, Some(seed)) => ExperimentManifest::new(seed),
        (None, None) => return Err(Error::Config("a seed is required: pass --manifest or --seed".into())),
    };
    if let Some(seed) = common.seed {
        m.seed = seed;
    }
    if let Some(out) = &common.out {
        m.out_dir = out.clone();
    }
    m.validate()?;
    Ok(m)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    match (&common.out, &common.manifest) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(path)) => Ok(ExperimentManifest::load(path)?.out_dir),
        (None, None) => Err(Error::Config("pass --out or --manifest".into())),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeacher(common) => {
            let r = pipeline::cmd_train_teacher(&manifest(&common)?)?;
            println!(
                "teacher accuracy {:.4} ± {:.4} on {} samples, {} parameters, {:.1}s, weights {}",
                r.accuracy, r.std_error, r.num_samples, r.num_params, r.train_seconds, r.weights_hash
            );
        }
        Command::Extract(common) => {
            let m = manifest(&common)?;
            let dump = pipeline::cmd_extract(&m)?;
            println!(
                "wrote {} ({} layers, {} samples, dim {})",
                m.out_dir.join(pipeline::DUMP_FILE).display(),
                dump.num_layers(),
                dump.num_samples,
                dump.dim
            );
        }
        Command::Similarity {
            common,
            dump,
            metrics,
            k,
        } => {
            let m = manifest(&common)?;
            let dump = dump.unwrap_or_else(|| m.out_dir.join(pipeline::DUMP_FILE));
            let metrics = if metrics.is_empty() { m.metrics.clone() } else { metrics };
            let splits = pipeline::cmd_similarity(&dump, &metrics, k.unwrap_or(m.k), &m.out_dir)?;
            for (metric, split) in splits {
                println!("{metric}: blocks 1..={split} and {}..", split + 1);
            }
        }
        Command::Prune { common, heuristics } => {
            let mut m = manifest(&common)?;
            if !heuristics.is_empty() {
                m.pruning.heuristics = heuristics;
            }
            for curve in pipeline::cmd_prune_manifest(&m)? {
                println!(
                    "{}: {} of {} blocks deletable at 95% retention",
                    curve.heuristic,
                    curve.max_pruned_at(0.95),
                    curve.num_blocks
                );
            }
        }
        Command::Mimic { common, sweep } => {
            let m = manifest(&common)?;
            let sweep = sweep.as_deref().map(MimicSweep::load).transpose()?;
            for row in pipeline::cmd_mimic(&m, sweep.as_ref())? {
                println!(
                    "{:<14} {:<12} layers={} params={:>6} time={:.3} accuracy={:.4}",
                    row.network_type.to_string(),
                    row.layer_type.as_deref().unwrap_or("-"),
                    row.num_layers,
                    row.num_params,
                    row.normalized_time,
                    row.accuracy
                );
            }
        }
        Command::Report(common) => {
            let dir = out_dir(&common)?;
            pipeline::cmd_report(&dir)?;
            println!("wrote {}", dir.join(pipeline::REPORT_FILE).display());
        }
        Command::Run(common) => {
            let m = manifest(&common)?;
            pipeline::run_all(&m)?;
            println!("wrote {}", m.out_dir.join(pipeline::REPORT_FILE).display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Training => EXIT_TRAINING,
        ErrorKind::Io => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
