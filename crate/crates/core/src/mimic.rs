//! Mimicking networks: replace the whole transformer stack of a trained
//! teacher by one or two small layers.
//!
//! Training runs in two phases. The mimic phase fits the mimic layers to the
//! teacher's mean-pooled block representations with an MSE loss (final block,
//! plus an intermediate block `i` when two layers are used). The adaptation
//! phase then fine-tunes the mimic layers together with a fresh classifier on
//! the labels. The teacher's feature extractor is copied and stays frozen.

use std::fmt;
use std::io::Write;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::activation::ActivationDump;
use crate::error::{Error, Result};
use crate::model::layers::{self, gelu, gelu_grad, Block, BlockCache, Classifier, Extractor, Layer, Linear, Params};
use crate::model::timing::{time_inference, TimingReport};
use crate::model::train::{fit, validation_subset, LossTrace, TrainOptions};
use crate::model::{evaluate, Evaluation, Predictor, SynthDataset, ToyTransformer};
use crate::numfmt;
use crate::parallel;
use crate::pruning::detect_blocks;
use crate::rng::{substream, subseed};
use crate::similarity::{similarity_matrix, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicLayerType {
    LinearMimic,
    Transformer,
}

impl MimicLayerType {
    pub fn name(self) -> &'static str {
        match self {
            MimicLayerType::LinearMimic => "linear_mimic",
            MimicLayerType::Transformer => "transformer",
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MimicConfig {
    pub layer_type: MimicLayerType,
    pub num_layers: usize,
    /// Bottleneck width of a linear mimic layer, or feedforward width of a
    /// transformer mimic layer.
    pub z: usize,
    /// Run the mimic phase before adaptation.
    pub mimicking: bool,
    /// Teacher block whose representation the first of two layers mimics
    /// (1-based). Detected from the teacher when absent.
    #[serde(default)]
    pub intermediate_layer: Option<usize>,
    /// GELU between the projections of a linear mimic layer.
    #[serde(default = "default_true")]
    pub nonlinearity: bool,
}

impl MimicConfig {
    pub fn new(layer_type: MimicLayerType, num_layers: usize, z: usize, mimicking: bool) -> Self {
        MimicConfig {
            layer_type,
            num_layers,
            z,
            mimicking,
            intermediate_layer: None,
            nonlinearity: true,
        }
    }

    pub fn validate(&self, teacher_blocks: usize) -> Result<()> {
        if !(1..=2).contains(&self.num_layers) {
            return Err(Error::Config(format!("num_layers must be 1 or 2, got {}", self.num_layers)));
        }
        if self.z == 0 {
            return Err(Error::Config("z must be positive".into()));
        }
        if let Some(i) = self.intermediate_layer {
            if i == 0 || i >= teacher_blocks {
                return Err(Error::Config(format!(
                    "intermediate layer {i} must lie in 1..{teacher_blocks}"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "{}-{}x-z{}-{}",
            self.layer_type.name(),
            self.num_layers,
            self.z,
            if self.mimicking { "mimic" } else { "adapt" }
        )
    }
}

// ---------------------------------------------------------------------------
// Layers

/// Per-frame bottleneck `d -> z -> d`, optionally with a GELU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMimicLayer {
    pub down: Linear,
    pub up: Linear,
    pub nonlinear: bool,
}

pub struct LinearMimicCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl LinearMimicLayer {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, z: usize, nonlinear: bool, rng: &mut R) -> Self {
        LinearMimicLayer {
            down: Linear::new(dim, z, rng),
            up: Linear::new(z, dim, rng),
            nonlinear,
        }
    }

    pub fn param_count(dim: usize, z: usize) -> usize {
        Linear::param_count(dim, z) + Linear::param_count(z, dim)
    }
}

impl Params for LinearMimicLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.down.visit(f);
        self.up.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.down.visit_mut(f);
        self.up.visit_mut(f);
    }
}

impl Layer for LinearMimicLayer {
    type Cache = LinearMimicCache;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, LinearMimicCache) {
        let (pre, input) = self.down.forward(x, seq_len);
        let hidden = if self.nonlinear { pre.mapv(gelu) } else { pre.clone() };
        let y = self.up.apply(&hidden, seq_len);
        (y, LinearMimicCache { input, pre, hidden })
    }

    fn backward(&self, cache: &LinearMimicCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        let mut dh = self.up.backward(&cache.hidden, dy, &mut grad.up);
        if self.nonlinear {
            dh.zip_mut_with(&cache.pre, |g, &x| *g *= gelu_grad(x));
        }
        self.down.backward(&cache.input, &dh, &mut grad.down)
    }

    fn zeros_like(&self) -> Self {
        LinearMimicLayer {
            down: self.down.zeros_like(),
            up: self.up.zeros_like(),
            nonlinear: self.nonlinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum MimicLayer {
    Linear(LinearMimicLayer),
    Transformer(Block),
}

pub enum MimicLayerCache {
    Linear(LinearMimicCache),
    Transformer(Box<BlockCache>),
}

impl Params for MimicLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            MimicLayer::Linear(l) => l.visit(f),
            MimicLayer::Transformer(b) => b.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            MimicLayer::Linear(l) => l.visit_mut(f),
            MimicLayer::Transformer(b) => b.visit_mut(f),
        }
    }
}

impl Layer for MimicLayer {
    type Cache = MimicLayerCache;

    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Array2<f64>, MimicLayerCache) {
        match self {
            MimicLayer::Linear(l) => {
                let (y, c) = l.forward(x, seq_len);
                (y, MimicLayerCache::Linear(c))
            }
            MimicLayer::Transformer(b) => {
                let (y, c) = b.forward(x, seq_len);
                (y, MimicLayerCache::Transformer(Box::new(c)))
            }
        }
    }

    fn backward(&self, cache: &MimicLayerCache, dy: &Array2<f64>, grad: &mut Self) -> Array2<f64> {
        match (self, cache, grad) {
            (MimicLayer::Linear(l), MimicLayerCache::Linear(c), MimicLayer::Linear(g)) => l.backward(c, dy, g),
            (MimicLayer::Transformer(b), MimicLayerCache::Transformer(c), MimicLayer::Transformer(g)) => {
                b.backward(c, dy, g)
            }
            _ => unreachable!("gradient and cache variants follow the layer"),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            MimicLayer::Linear(l) => MimicLayer::Linear(l.zeros_like()),
            MimicLayer::Transformer(b) => MimicLayer::Transformer(b.zeros_like()),
        }
    }
}

/// The mimic layers alone, optimised during the mimic phase.
#[derive(Debug, Clone, PartialEq)]
pub struct MimicStack(pub Vec<MimicLayer>);

impl Params for MimicStack {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.0 {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.0 {
            l.visit_mut(f);
        }
    }
}

impl MimicStack {
    fn zeros_like(&self) -> Self {
        MimicStack(self.0.iter().map(Layer::zeros_like).collect())
    }

    /// Outputs of every layer plus caches.
    fn forward(&self, x: &Array2<f64>, seq_len: usize) -> (Vec<Array2<f64>>, Vec<MimicLayerCache>) {
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(self.0.len());
        let mut caches = Vec::with_capacity(self.0.len());
        for layer in &self.0 {
            let (y, c) = layer.forward(outs.last().unwrap_or(x), seq_len);
            outs.push(y);
            caches.push(c);
        }
        (outs, caches)
    }

    fn apply(&self, x: &Array2<f64>, seq_len: usize) -> Array2<f64> {
        let mut h = x.clone();
        for layer in &self.0 {
            h = layer.apply(&h, seq_len);
        }
        h
    }

    /// `douts[i]` is an extra gradient on the output of layer `i`.
    fn backward(&self, caches: &[MimicLayerCache], douts: &[Option<Array2<f64>>], grad: &mut MimicStack) -> Option<Array2<f64>> {
        let mut carry: Option<Array2<f64>> = None;
        for i in (0..self.0.len()).rev() {
            let dy = match (carry.take(), &douts[i]) {
                (Some(c), Some(d)) => c + d,
                (Some(c), None) => c,
                (None, Some(d)) => d.clone(),
                (None, None) => continue,
            };
            carry = Some(self.0[i].backward(&caches[i], &dy, &mut grad.0[i]));
        }
        carry
    }
}

/// Mimic layers and classifier, optimised during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct MimicHead {
    pub stack: MimicStack,
    pub classifier: Classifier,
}

impl Params for MimicHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.stack.visit(f);
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.stack.visit_mut(f);
        self.classifier.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Network

#[derive(Debug, Clone, PartialEq)]
pub struct MimicNetwork {
    /// `None` for the classifier-only baseline.
    pub config: Option<MimicConfig>,
    pub extractor: Extractor,
    pub head: MimicHead,
    pub frames: usize,
    pub input_dim: usize,
    /// Teacher block mimicked by the first of two layers (1-based).
    pub intermediate_layer: Option<usize>,
    /// Whether the mimic phase has run.
    pub mimicked: bool,
}

/// Builds a freshly initialised mimicking network for `teacher`.
///
/// With two layers and no configured intermediate layer, the split of the
/// teacher's mutual-kNN similarity matrix over `activations` is used.
pub fn build_mimic(
    teacher: &ToyTransformer,
    config: &MimicConfig,
    activations: Option<&ActivationDump>,
    seed: u64,
) -> Result<MimicNetwork> {
    let l = teacher.num_blocks();
    config.validate(l)?;
    let intermediate_layer = if config.num_layers == 2 {
        Some(match config.intermediate_layer {
            Some(i) => i,
            None => {
                let dump = activations.ok_or_else(|| {
                    Error::Config("two mimic layers need an intermediate layer or teacher activations".into())
                })?;
                let sim = similarity_matrix(dump, Metric::MutualKnn, None)?;
                detect_blocks(&sim)?
            }
        })
    } else {
        None
    };
    let mut rng = substream(seed, "mimic/init");
    let cfg = &teacher.config;
    let layers = (0..config.num_layers)
        .map(|_| match config.layer_type {
            MimicLayerType::LinearMimic => {
                MimicLayer::Linear(LinearMimicLayer::new(cfg.dim, config.z, config.nonlinearity, &mut rng))
            }
            MimicLayerType::Transformer => MimicLayer::Transformer(Block::new(cfg.dim, cfg.heads, config.z, &mut rng)),
        })
        .collect();
    Ok(MimicNetwork {
        config: Some(*config),
        extractor: teacher.extractor.clone(),
        head: MimicHead {
            stack: MimicStack(layers),
            classifier: Classifier::new(cfg.dim, cfg.classes, &mut rng),
        },
        frames: cfg.frames,
        input_dim: cfg.input_dim,
        intermediate_layer,
        mimicked: false,
    })
}

/// Frozen teacher extractor plus a fresh affine classifier.
pub fn build_classifier_only(teacher: &ToyTransformer, seed: u64) -> MimicNetwork {
    let mut rng = substream(seed, "mimic/init");
    let cfg = &teacher.config;
    MimicNetwork {
        config: None,
        extractor: teacher.extractor.clone(),
        head: MimicHead {
            stack: MimicStack(Vec::new()),
            classifier: Classifier::new(cfg.dim, cfg.classes, &mut rng),
        },
        frames: cfg.frames,
        input_dim: cfg.input_dim,
        intermediate_layer: None,
        mimicked: false,
    }
}

impl MimicNetwork {
    pub fn num_layers(&self) -> usize {
        self.head.stack.0.len()
    }

    /// Extractor outputs for a whole dataset, `(m*T) x d`.
    fn features(&self, data: &SynthDataset) -> Array2<f64> {
        let all: Vec<usize> = (0..data.len()).collect();
        self.extractor.apply(&data.batch(&all), self.frames)
    }

    fn feature_rows(&self, features: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        let t = self.frames;
        let mut out = Array2::zeros((idx.len() * t, features.ncols()));
        for (b, &i) in idx.iter().enumerate() {
            out.slice_mut(s![b * t..(b + 1) * t, ..])
                .assign(&features.slice(s![i * t..(i + 1) * t, ..]));
        }
        out
    }
}

impl Predictor for MimicNetwork {
    fn frames(&self) -> usize {
        self.frames
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.head.stack.apply(&self.extractor.apply(x, self.frames), self.frames);
        self.head.classifier.apply(&h, self.frames)
    }

    fn count_params(&self) -> usize {
        self.extractor.num_params() + self.head.num_params()
    }
}

/// Step 1: fit the mimic layers to the teacher's pooled representations.
pub fn mimic_phase(
    network: &mut MimicNetwork,
    teacher: &ToyTransformer,
    train_data: &SynthDataset,
    validation: &SynthDataset,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    let config = network
        .config
        .ok_or_else(|| Error::Config("the classifier-only baseline has no mimic layers".into()))?;
    if !config.mimicking {
        return Err(Error::Config(format!(
            "{} is a non-mimicking configuration; the mimic phase is skipped",
            config.label()
        )));
    }
    let t = network.frames;
    let final_idx = teacher.num_blocks() - 1;
    let inter_idx = network.intermediate_layer.map(|i| i - 1);

    let train_dump = teacher.forward_with_activations(train_data)?;
    let val_ids = validation_subset(validation.len(), opts.val_subset, opts.seed);
    let val_subset = subset(validation, &val_ids);
    let val_dump = teacher.forward_with_activations(&val_subset)?;

    let train_feats = network.features(train_data);
    let val_feats = network.features(&val_subset);

    let components: &[&str] = if inter_idx.is_some() {
        &["intermediate_mse", "final_mse"]
    } else {
        &["final_mse"]
    };

    let losses = |stack: &MimicStack, x: &Array2<f64>, dump: &ActivationDump, rows: Option<&[usize]>, with_grad: bool| {
        let (outs, caches) = stack.forward(x, t);
        let target = |layer: usize| match rows {
            Some(r) => dump.layers[layer].select(Axis(0), r),
            None => dump.layers[layer].clone(),
        };
        let mut parts = Vec::new();
        let mut douts: Vec<Option<Array2<f64>>> = vec![None; outs.len()];
        if let Some(ii) = inter_idx {
            let (loss, dp) = layers::mse(&layers::mean_pool(&outs[0], t), &target(ii).view());
            parts.push(loss);
            douts[0] = Some(layers::mean_pool_backward(&dp, t));
        }
        let last = outs.len() - 1;
        let (loss, dp) = layers::mse(&layers::mean_pool(&outs[last], t), &target(final_idx).view());
        parts.push(loss);
        douts[last] = Some(layers::mean_pool_backward(&dp, t));
        let grad = with_grad.then(|| {
            let mut g = stack.zeros_like();
            stack.backward(&caches, &douts, &mut g);
            g
        });
        (parts, grad)
    };

    let mut stack = network.head.stack.clone();
    let trace = fit(
        &mut stack,
        train_data.len(),
        opts,
        components,
        |st, batch| {
            let x = network.feature_rows(&train_feats, batch);
            let (parts, grad) = losses(st, &x, &train_dump, Some(batch), true);
            (parts, grad.expect("requested"))
        },
        |st| losses(st, &val_feats, &val_dump, None, false).0.iter().sum(),
    )?;
    network.head.stack = stack;
    network.mimicked = true;
    Ok(trace)
}

/// Step 2: fine-tune mimic layers and classifier on the labels.
pub fn adaptation_phase(
    network: &mut MimicNetwork,
    train_data: &SynthDataset,
    validation: &SynthDataset,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    let t = network.frames;
    let val_ids = validation_subset(validation.len(), opts.val_subset, opts.seed);
    let val_subset = subset(validation, &val_ids);
    let train_feats = network.features(train_data);
    let val_feats = network.features(&val_subset);

    let nll_of = |head: &MimicHead, x: &Array2<f64>, labels: &[usize], with_grad: bool| {
        let (outs, caches) = head.stack.forward(x, t);
        let last = outs.last().unwrap_or(x);
        let (lp, ccache) = head.classifier.forward(last, t);
        let (loss, dlp) = layers::nll(&lp, labels);
        let grad = with_grad.then(|| {
            let mut g = MimicHead {
                stack: head.stack.zeros_like(),
                classifier: head.classifier.zeros_like(),
            };
            let dh = head.classifier.backward(&ccache, &dlp, &mut g.classifier);
            if !outs.is_empty() {
                let mut douts: Vec<Option<Array2<f64>>> = vec![None; outs.len()];
                douts[outs.len() - 1] = Some(dh);
                head.stack.backward(&caches, &douts, &mut g.stack);
            }
            g
        });
        (loss, grad)
    };

    let mut head = network.head.clone();
    let trace = fit(
        &mut head,
        train_data.len(),
        opts,
        &["nll"],
        |h, batch| {
            let x = network.feature_rows(&train_feats, batch);
            let (loss, grad) = nll_of(h, &x, &train_data.batch_labels(batch), true);
            (vec![loss], grad.expect("requested"))
        },
        |h| nll_of(h, &val_feats, &val_subset.labels, false).0,
    )?;
    network.head = head;
    Ok(trace)
}

fn subset(data: &SynthDataset, idx: &[usize]) -> SynthDataset {
    SynthDataset {
        split: data.split,
        inputs: data.inputs.select(Axis(0), idx),
        labels: data.batch_labels(idx),
        offsets: idx.iter().map(|&i| data.offsets[i]).collect(),
    }
}

// ---------------------------------------------------------------------------
// Comparison tables

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkType {
    Original,
    Mimicker,
    NonMimicker,
    ClassifierOnly,
}

impl fmt::Display for NetworkType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkType::Original => "Original",
            NetworkType::Mimicker => "Mimicker",
            NetworkType::NonMimicker => "Non-mimicker",
            NetworkType::ClassifierOnly => "ClassifierOnly",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub network_type: NetworkType,
    /// `None` when there is no layer between extractor and classifier.
    pub layer_type: Option<String>,
    pub num_layers: usize,
    pub z: Option<usize>,
    pub num_params: usize,
    pub normalized_time: f64,
    pub accuracy: f64,
    pub accuracy_std_error: f64,
    pub config: Option<MimicConfig>,
    pub intermediate_layer: Option<usize>,
    pub timing: TimingReport,
}

impl ComparisonRow {
    pub fn param_reduction(&self, original: usize) -> f64 {
        1.0 - self.num_params as f64 / original as f64
    }
}

pub const COMPARISON_HEADER: &str =
    "network_type,layer_type,n_layers,z,num_params,inference_time_normalized,accuracy,accuracy_std_error";

/// Writes rows in table column order.
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut out: W) -> Result<()> {
    writeln!(out, "{COMPARISON_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.network_type,
            r.layer_type.as_deref().unwrap_or("-"),
            r.num_layers,
            r.z.map(|z| z.to_string()).unwrap_or_else(|| "-".into()),
            r.num_params,
            numfmt::significant(r.normalized_time, 6),
            numfmt::significant(r.accuracy, 9),
            numfmt::significant(r.accuracy_std_error, 9),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub mimic: TrainOptions,
    pub adaptation: TrainOptions,
    pub warmup_steps: usize,
    /// Number of test samples timed per model.
    pub timing_samples: usize,
    pub seed: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            mimic: TrainOptions {
                epochs: 50,
                ..TrainOptions::default()
            },
            adaptation: TrainOptions {
                epochs: 30,
                ..TrainOptions::default()
            },
            warmup_steps: crate::model::timing::DEFAULT_WARMUP,
            timing_samples: 200,
            seed: 0,
        }
    }
}

/// A trained network together with its training traces.
pub struct TrainedMimic {
    pub network: MimicNetwork,
    pub mimic_trace: Option<LossTrace>,
    pub adaptation_trace: LossTrace,
}

/// Builds and trains one configuration (both phases when mimicking).
pub fn train_mimic(
    teacher: &ToyTransformer,
    config: &MimicConfig,
    train_data: &SynthDataset,
    validation: &SynthDataset,
    activations: Option<&ActivationDump>,
    opts: &CompareOptions,
    seed: u64,
) -> Result<TrainedMimic> {
    let mut network = build_mimic(teacher, config, activations, seed)?;
    let mimic_trace = if config.mimicking {
        let o = TrainOptions {
            seed: subseed(seed, "mimic-phase"),
            ..opts.mimic.clone()
        };
        Some(mimic_phase(&mut network, teacher, train_data, validation, &o)?)
    } else {
        None
    };
    let o = TrainOptions {
        seed: subseed(seed, "adaptation-phase"),
        ..opts.adaptation.clone()
    };
    let adaptation_trace = adaptation_phase(&mut network, train_data, validation, &o)?;
    Ok(TrainedMimic {
        network,
        mimic_trace,
        adaptation_trace,
    })
}

/// Original, classifier-only and one row per config, in that order.
///
/// Configurations train independently (in parallel when enabled) with
/// disjoint seeds; timing then runs sequentially on the calling thread.
pub fn compare(
    teacher: &ToyTransformer,
    configs: &[MimicConfig],
    train_data: &SynthDataset,
    validation: &SynthDataset,
    eval_data: &SynthDataset,
    opts: &CompareOptions,
) -> Result<Vec<ComparisonRow>> {
    let needs_dump = configs.iter().any(|c| c.num_layers == 2 && c.intermediate_layer.is_none());
    let dump = if needs_dump {
        Some(teacher.forward_with_activations(validation)?)
    } else {
        None
    };

    let trained: Vec<Result<TrainedMimic>> = parallel::map_indices(configs.len(), |i| {
        let seed = subseed(opts.seed, &format!("mimic/config/{i}"));
        train_mimic(teacher, &configs[i], train_data, validation, dump.as_ref(), opts, seed)
    });
    let trained: Vec<TrainedMimic> = trained.into_iter().collect::<Result<_>>()?;

    let mut baseline = build_classifier_only(teacher, subseed(opts.seed, "mimic/classifier-only"));
    adaptation_phase(
        &mut baseline,
        train_data,
        validation,
        &TrainOptions {
            seed: subseed(opts.seed, "classifier-only/adaptation"),
            ..opts.adaptation.clone()
        },
    )?;

    let samples: Vec<Array2<f64>> = (0..opts.timing_samples.min(eval_data.len()))
        .map(|i| eval_data.sample(i))
        .collect();
    let reference = time_inference(teacher, &samples, opts.warmup_steps, None);

    let teacher_eval = evaluate(teacher, eval_data);
    let mut rows = vec![ComparisonRow {
        network_type: NetworkType::Original,
        layer_type: Some(MimicLayerType::Transformer.name().into()),
        num_layers: teacher.num_blocks(),
        z: None,
        num_params: teacher.count_params(),
        normalized_time: 1.0,
        accuracy: teacher_eval.accuracy,
        accuracy_std_error: teacher_eval.std_error,
        config: None,
        intermediate_layer: None,
        timing: reference.normalized_to(&reference),
    }];
    rows.push(row_for(&baseline, &evaluate(&baseline, eval_data), &samples, opts, &reference));
    for t in &trained {
        rows.push(row_for(&t.network, &evaluate(&t.network, eval_data), &samples, opts, &reference));
    }
    Ok(rows)
}

fn row_for(
    net: &MimicNetwork,
    eval: &Evaluation,
    samples: &[Array2<f64>],
    opts: &CompareOptions,
    reference: &TimingReport,
) -> ComparisonRow {
    let timing = time_inference(net, samples, opts.warmup_steps, Some(reference));
    let (network_type, layer_type, z) = match &net.config {
        None => (NetworkType::ClassifierOnly, None, None),
        Some(c) => (
            if c.mimicking {
                NetworkType::Mimicker
            } else {
                NetworkType::NonMimicker
            },
            Some(c.layer_type.name().to_string()),
            Some(c.z),
        ),
    };
    ComparisonRow {
        network_type,
        layer_type,
        num_layers: net.num_layers(),
        z,
        num_params: net.count_params(),
        normalized_time: timing.normalized_time,
        accuracy: eval.accuracy,
        accuracy_std_error: eval.std_error,
        config: net.config,
        intermediate_layer: net.intermediate_layer,
        timing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::{gradient_check, MseProbe, Probe, DEFAULT_EPSILON};
    use crate::model::{generate_dataset, ToyConfig};
    use rand::Rng;

    fn tiny() -> ToyConfig {
        ToyConfig {
            num_blocks: 4,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            frames: 8,
            input_dim: 3,
            classes: 4,
            seed: 9,
        }
    }

    #[test]
    fn linear_mimic_param_count_closed_form() {
        let teacher = ToyTransformer::new(tiny()).unwrap();
        let net = build_mimic(&teacher, &MimicConfig::new(MimicLayerType::LinearMimic, 1, 8, true), None, 1).unwrap();
        let (d, z) = (8, 8);
        let expected = teacher.extractor.num_params() + (d * z + z + z * d + d) + teacher.classifier.num_params();
        assert_eq!(net.count_params(), expected);
        assert!(net.count_params() < teacher.count_params());
    }

    #[test]
    fn transformer_mimic_uses_z_as_feedforward_width() {
        let teacher = ToyTransformer::new(tiny()).unwrap();
        let net = build_mimic(&teacher, &MimicConfig::new(MimicLayerType::Transformer, 1, 20, false), None, 1).unwrap();
        match &net.head.stack.0[0] {
            MimicLayer::Transformer(b) => assert_eq!(b.ff_dim(), 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn intermediate_layer_must_be_inside_stack() {
        let teacher = ToyTransformer::new(tiny()).unwrap();
        let mut cfg = MimicConfig::new(MimicLayerType::LinearMimic, 2, 8, true);
        cfg.intermediate_layer = Some(4);
        assert!(matches!(build_mimic(&teacher, &cfg, None, 1), Err(Error::Config(_))));
        cfg.intermediate_layer = None;
        assert!(matches!(build_mimic(&teacher, &cfg, None, 1), Err(Error::Config(_))));
        cfg.intermediate_layer = Some(2);
        assert_eq!(build_mimic(&teacher, &cfg, None, 1).unwrap().intermediate_layer, Some(2));
    }

    #[test]
    fn mimic_layer_gradients() {
        let mut rng = substream(1, "mimic/gradcheck");
        let x = Array2::from_shape_simple_fn((8, 6), || rng.random_range(-1.0..1.0));
        for nonlinear in [true, false] {
            let probe = Probe::new(LinearMimicLayer::new(6, 5, nonlinear, &mut rng), &x, 4, &mut rng);
            let err = gradient_check(&probe, &x, DEFAULT_EPSILON);
            assert!(err < 1e-5, "nonlinear={nonlinear}: {err}");
        }
        let target = Array2::from_shape_simple_fn((2, 6), || rng.random_range(-1.0..1.0));
        let probe = MseProbe {
            layer: MimicLayer::Linear(LinearMimicLayer::new(6, 5, true, &mut rng)),
            target,
            seq_len: 4,
        };
        assert!(gradient_check(&probe, &x, DEFAULT_EPSILON) < 1e-5);
    }

    #[test]
    fn linear_mimic_is_frame_equivariant() {
        let mut rng = substream(2, "mimic/perm");
        let layer = LinearMimicLayer::new(6, 4, true, &mut rng);
        let x = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let permuted = x.select(Axis(0), &perm);
        let a = layer.apply(&permuted, 5);
        let b = layer.apply(&x, 5).select(Axis(0), &perm);
        assert_eq!(a, b);
    }

    #[test]
    fn non_mimicking_config_refuses_mimic_phase() {
        let teacher = ToyTransformer::new(tiny()).unwrap();
        let [train, val, _] = generate_dataset(&tiny(), 8);
        let mut net = build_mimic(&teacher, &MimicConfig::new(MimicLayerType::LinearMimic, 1, 4, false), None, 1).unwrap();
        let r = mimic_phase(&mut net, &teacher, &train, &val, &TrainOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn phases_keep_extractor_frozen() {
        let teacher = ToyTransformer::new(tiny()).unwrap();
        let [train, val, _] = generate_dataset(&tiny(), 32);
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let mut cfg = MimicConfig::new(MimicLayerType::LinearMimic, 2, 6, true);
        cfg.intermediate_layer = Some(2);
        let mut net = build_mimic(&teacher, &cfg, None, 3).unwrap();
        let trace = mimic_phase(&mut net, &teacher, &train, &val, &opts).unwrap();
        assert_eq!(trace.components, vec!["intermediate_mse", "final_mse"]);
        assert!(trace.train.iter().all(|p| p.parts.len() == 2));
        adaptation_phase(&mut net, &train, &val, &opts).unwrap();
        assert_eq!(net.extractor, teacher.extractor);

        let mut single = build_mimic(&teacher, &MimicConfig::new(MimicLayerType::Transformer, 1, 6, true), None, 3).unwrap();
        let trace = mimic_phase(&mut single, &teacher, &train, &val, &opts).unwrap();
        assert_eq!(trace.components, vec!["final_mse"]);
        assert!(trace.train.iter().all(|p| p.parts.len() == 1));
        assert!(trace.best_validation <= trace.initial_validation().unwrap());
    }

    #[test]
    fn comparison_csv_columns() {
        let row = ComparisonRow {
            network_type: NetworkType::NonMimicker,
            layer_type: Some("linear_mimic".into()),
            num_layers: 1,
            z: Some(64),
            num_params: 1000,
            normalized_time: 0.125,
            accuracy: 0.5,
            accuracy_std_error: 0.01,
            config: None,
            intermediate_layer: None,
            timing: TimingReport {
                warmup_steps: 0,
                measured_runs: 0,
                mean_seconds: 0.0,
                std_error_seconds: 0.0,
                normalized_time: 0.125,
            },
        };
        let mut out = Vec::new();
        write_comparison_csv(&[row], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], COMPARISON_HEADER);
        assert!(lines[1].starts_with("Non-mimicker,linear_mimic,1,64,1000,0.125000,"));
    }
}
