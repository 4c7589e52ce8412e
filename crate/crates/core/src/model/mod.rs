//! The toy transformer teacher: feature extractor, a stack of pre-norm
//! transformer blocks and a mean-pooling classifier head.

pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod timing;
pub mod train;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::ActivationDump;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::substream;

pub use data::{generate_dataset, generate_splits, Split, SynthDataset};
pub use layers::{Block, Classifier, Extractor, Layer, Params};
pub use timing::{time_inference, TimingReport};
pub use train::{train, LossTrace, Objective, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub frames: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_blocks: 8,
            dim: 32,
            heads: 4,
            ff_dim: 64,
            frames: 32,
            input_dim: 8,
            classes: 8,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("frames", self.frames),
            ("input_dim", self.input_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("frames must be at least 2".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of a model built from this config.
    pub fn param_count(&self) -> usize {
        Extractor::param_count(self.input_dim, self.dim)
            + self.num_blocks * Block::param_count(self.dim, self.ff_dim)
            + Classifier::param_count(self.dim, self.classes)
    }
}

/// Anything that maps `(B*T) x D` inputs to `B x C` log-probabilities.
pub trait Predictor: Sync {
    fn frames(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn predict_batch(&self, x: &Array2<f64>) -> Array2<f64>;
    fn count_params(&self) -> usize;

    /// Log-probabilities for a single `T x D` input.
    fn forward(&self, input: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if input.dim() != (self.frames(), self.input_dim()) {
            return Err(Error::Shape(format!(
                "expected a {}x{} input, got {:?}",
                self.frames(),
                self.input_dim(),
                input.dim()
            )));
        }
        let out = self.predict_batch(&input.to_owned());
        Ok(out.row(0).to_owned())
    }
}

pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Standard error of the mean of the per-sample 0/1 correctness.
    pub std_error: f64,
    pub mean_nll: f64,
    pub num_samples: usize,
}

/// Per-sample evaluation, fanned out over chunks of the dataset.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &SynthDataset) -> Evaluation {
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let per_chunk = parallel::map_slice(&chunks, |idx| {
        let lp = model.predict_batch(&data.batch(idx));
        idx.iter()
            .enumerate()
            .map(|(r, &i)| {
                let row = lp.row(r);
                let label = data.labels[i];
                (argmax(row.as_slice().unwrap()) == label, -row[label])
            })
            .collect::<Vec<_>>()
    });
    let outcomes: Vec<(bool, f64)> = per_chunk.into_iter().flatten().collect();
    summarize(&outcomes)
}

fn summarize(outcomes: &[(bool, f64)]) -> Evaluation {
    let n = outcomes.len();
    if n == 0 {
        return Evaluation {
            accuracy: 0.0,
            std_error: 0.0,
            mean_nll: 0.0,
            num_samples: 0,
        };
    }
    let correct = outcomes.iter().filter(|(c, _)| *c).count() as f64;
    let acc = correct / n as f64;
    let std_error = if n > 1 {
        let var = (correct * (1.0 - acc).powi(2) + (n as f64 - correct) * acc.powi(2)) / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Evaluation {
        accuracy: acc,
        std_error,
        mean_nll: outcomes.iter().map(|(_, l)| l).sum::<f64>() / n as f64,
        num_samples: n,
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformer {
    pub config: ToyConfig,
    pub extractor: Extractor,
    pub blocks: Vec<Block>,
    /// Original 1-based index of every surviving block.
    pub block_ids: Vec<usize>,
    pub classifier: Classifier,
}

/// Intermediate values of a training forward pass.
pub struct ForwardTrace {
    extractor: Array2<f64>,
    blocks: Vec<layers::BlockCache>,
    classifier: layers::ClassifierCache,
    pub hidden: Vec<Array2<f64>>,
    pub log_probs: Array2<f64>,
}

/// Classifier weights start at this fraction of the fan-in scale.
const CLASSIFIER_INIT_SCALE: f64 = 0.1;

impl ToyTransformer {
    /// Fresh model with weights drawn from the config seed. The output
    /// projections of every residual branch are scaled by `1/sqrt(2L)`.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, "model/init");
        let extractor = Extractor::new(config.input_dim, config.dim, config.frames, &mut rng);
        let residual_scale = 1.0 / ((2 * config.num_blocks) as f64).sqrt();
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let mut block = Block::new(config.dim, config.heads, config.ff_dim, &mut rng);
                block.attn.out.weight *= residual_scale;
                block.ffn.down.weight *= residual_scale;
                block
            })
            .collect();
        let mut classifier = Classifier::new(config.dim, config.classes, &mut rng);
        classifier.linear.weight *= CLASSIFIER_INIT_SCALE;
        Ok(ToyTransformer {
            config,
            extractor,
            blocks,
            block_ids: (1..=config.num_blocks).collect(),
            classifier,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn zeros_like(&self) -> Self {
        ToyTransformer {
            config: self.config,
            extractor: self.extractor.zeros_like(),
            blocks: self.blocks.iter().map(Layer::zeros_like).collect(),
            block_ids: self.block_ids.clone(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Output of the feature extractor for a `(B*T) x D` batch.
    pub fn extract(&self, x: &Array2<f64>) -> Array2<f64> {
        self.extractor.apply(x, self.config.frames)
    }

    /// Frame features after every block, `(B*T) x d` each.
    pub fn block_outputs(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let t = self.config.frames;
        let mut h = self.extract(x);
        let mut out = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.apply(&h, t);
            out.push(h.clone());
        }
        out
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> ForwardTrace {
        let t = self.config.frames;
        let (mut h, extractor) = self.extractor.forward(x, t);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, t);
            blocks.push(cache);
            h = next;
            hidden.push(h.clone());
        }
        let (log_probs, classifier) = self.classifier.forward(&h, t);
        ForwardTrace {
            extractor,
            blocks,
            classifier,
            hidden,
            log_probs,
        }
    }

    /// Backpropagates `dlog_probs` (and optionally a gradient on the last
    /// block's frame output) through a recorded trace.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        dlog_probs: Option<&Array2<f64>>,
        dlast_hidden: Option<&Array2<f64>>,
    ) -> ToyTransformer {
        let mut grad = self.zeros_like();
        let rows = trace.extractor.nrows();
        let mut dh = match dlog_probs {
            Some(d) => self.classifier.backward(&trace.classifier, d, &mut grad.classifier),
            None => Array2::zeros((rows, self.config.dim)),
        };
        if let Some(extra) = dlast_hidden {
            dh += extra;
        }
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dh = block.backward(&trace.blocks[i], &dh, &mut grad.blocks[i]);
        }
        self.extractor.backward(&trace.extractor, &dh, &mut grad.extractor);
        grad
    }

    /// Mean NLL over a labelled batch and its parameter gradient.
    pub fn nll_loss_grad(&self, x: &Array2<f64>, labels: &[usize]) -> (f64, ToyTransformer) {
        let trace = self.forward_trace(x);
        let (loss, dlp) = layers::nll(&trace.log_probs, labels);
        (loss, self.backward(&trace, Some(&dlp), None))
    }

    /// Mean-pooled representation after every block for each sample of
    /// `data`, packaged as an activation dump with labels.
    pub fn forward_with_activations(&self, data: &SynthDataset) -> Result<ActivationDump> {
        self.check_input(data)?;
        let t = self.config.frames;
        let chunks: Vec<Vec<usize>> = (0..data.len())
            .collect::<Vec<_>>()
            .chunks(EVAL_CHUNK)
            .map(|c| c.to_vec())
            .collect();
        let pooled = parallel::map_slice(&chunks, |idx| {
            self.block_outputs(&data.batch(idx))
                .iter()
                .map(|h| layers::mean_pool(h, t))
                .collect::<Vec<_>>()
        });
        let mut layers_out = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let parts: Vec<ArrayView2<'_, f64>> = pooled.iter().map(|c| c[b].view()).collect();
            layers_out.push(ndarray::concatenate(ndarray::Axis(0), &parts).expect("equal widths"));
        }
        ActivationDump::new(
            layers_out,
            Some(data.labels.iter().map(|&l| l as u32).collect()),
            Some(self.config.classes as u32),
        )
    }

    fn check_input(&self, data: &SynthDataset) -> Result<()> {
        if data.frames() != self.config.frames || data.input_dim() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "dataset has {}x{} inputs, model expects {}x{}",
                data.frames(),
                data.input_dim(),
                self.config.frames,
                self.config.input_dim
            )));
        }
        Ok(())
    }

    pub fn block_param_count(&self) -> usize {
        Block::param_count(self.config.dim, self.config.ff_dim)
    }

    // -- checkpoints ----------------------------------------------------------

    /// Raw little-endian `f64` weights behind a small header.
    pub fn write_weights<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.num_params() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.num_params() * 8);
        self.visit(&mut |p| {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_weights<R: Read>(meta: &CheckpointMeta, mut input: R) -> Result<Self> {
        let mut model = ToyTransformer::new(meta.config)?;
        model.retain_blocks(&meta.block_ids)?;
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| Error::Truncated {
            section: "checkpoint magic".into(),
        })?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| Error::Truncated {
            section: "checkpoint version".into(),
        })?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let mut count = [0u8; 8];
        input.read_exact(&mut count).map_err(|_| Error::Truncated {
            section: "checkpoint header".into(),
        })?;
        let count = u64::from_le_bytes(count) as usize;
        if count != model.num_params() {
            return Err(Error::Validation(format!(
                "checkpoint holds {count} weights, config implies {}",
                model.num_params()
            )));
        }
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes).map_err(|_| Error::Truncated {
            section: "checkpoint weights".into(),
        })?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.load_flat(&flat);
        Ok(model)
    }

    /// Writes `<stem>.bin` (weights) and `<stem>.json` (config sidecar).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let file = std::fs::File::create(&bin).map_err(Error::at_path(&bin))?;
        self.write_weights(std::io::BufWriter::new(file))?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            config: self.config,
            block_ids: self.block_ids.clone(),
        };
        std::fs::write(&json, serde_json::to_string_pretty(&meta)? + "\n").map_err(Error::at_path(&json))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(&json).map_err(Error::at_path(&json))?)?;
        let file = std::fs::File::open(&bin).map_err(Error::at_path(&bin))?;
        Self::read_weights(&meta, std::io::BufReader::new(file))
    }

    /// SHA-256 of the serialized weights, hex encoded.
    pub fn weights_hash(&self) -> String {
        let mut bytes = Vec::new();
        self.write_weights(&mut bytes).expect("in-memory write");
        hex_digest(&bytes)
    }

    /// Keeps only the blocks whose original ids appear in `ids` (which must
    /// be a subsequence of the current ids).
    pub(crate) fn retain_blocks(&mut self, ids: &[usize]) -> Result<()> {
        for id in ids {
            if !self.block_ids.contains(id) {
                return Err(Error::Validation(format!("unknown block id {id}")));
            }
        }
        let mut kept_blocks = Vec::new();
        let mut kept_ids = Vec::new();
        for (block, id) in self.blocks.drain(..).zip(self.block_ids.drain(..)) {
            if ids.contains(&id) {
                kept_blocks.push(block);
                kept_ids.push(id);
            }
        }
        self.blocks = kept_blocks;
        self.block_ids = kept_ids;
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSDW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ToyConfig,
    pub block_ids: Vec<usize>,
}

impl Params for ToyTransformer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.extractor.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.extractor.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }
}

impl Predictor for ToyTransformer {
    fn frames(&self) -> usize {
        self.config.frames
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let t = self.config.frames;
        let mut h = self.extract(x);
        for block in &self.blocks {
            h = block.apply(&h, t);
        }
        self.classifier.apply(&h, t)
    }

    fn count_params(&self) -> usize {
        self.num_params()
    }
}
