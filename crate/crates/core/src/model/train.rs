//! Mini-batch training with best-validation weight retention.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::{self, Params};
use super::{SynthDataset, ToyTransformer};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validate every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    /// Size of the fixed random validation subset used during training.
    pub val_subset: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            eval_every: 0,
            val_subset: 256,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn steps_per_epoch(&self, num_train: usize) -> usize {
        num_train.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
    pub parts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Names of the summed loss terms, in `TrainPoint::parts` order.
    pub components: Vec<String>,
    pub train: Vec<TrainPoint>,
    pub validation: Vec<ValidationPoint>,
    pub best_step: usize,
    pub best_validation: f64,
}

impl LossTrace {
    pub fn steps(&self) -> usize {
        self.train.len()
    }

    pub fn initial_validation(&self) -> Option<f64> {
        self.validation.first().map(|p| p.loss)
    }
}

/// Adam with a fixed step size over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Generic optimisation loop.
///
/// `step_fn` returns the loss terms and the parameter gradient (as a value of
/// the model type) for a batch of training indices; `val_fn` returns the
/// validation loss. The model ends up holding the weights with the lowest
/// validation loss seen, the initial weights included.
pub fn fit<M, S, V>(
    model: &mut M,
    num_train: usize,
    opts: &TrainOptions,
    components: &[&str],
    mut step_fn: S,
    mut val_fn: V,
) -> Result<LossTrace>
where
    M: Params,
    S: FnMut(&M, &[usize]) -> (Vec<f64>, M),
    V: FnMut(&M) -> f64,
{
    let mut rng = substream(opts.seed, "train/shuffle");
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len(), opts.learning_rate);
    let steps_per_epoch = opts.steps_per_epoch(num_train);
    let eval_every = if opts.eval_every == 0 {
        steps_per_epoch.max(1)
    } else {
        opts.eval_every
    };

    let initial = val_fn(model);
    let mut trace = LossTrace {
        components: components.iter().map(|s| s.to_string()).collect(),
        train: Vec::new(),
        validation: vec![ValidationPoint { step: 0, loss: initial }],
        best_step: 0,
        best_validation: initial,
    };
    let mut best = params.clone();

    let mut order: Vec<usize> = (0..num_train).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let (parts, grad) = step_fn(model, batch);
            let loss: f64 = parts.iter().sum();
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            adam.step(&mut params, &grad.flatten());
            model.load_flat(&params);
            trace.train.push(TrainPoint { step, loss, parts });

            if step % eval_every == 0 {
                let val = val_fn(model);
                if !val.is_finite() {
                    return Err(Error::Diverged { step, loss: val });
                }
                trace.validation.push(ValidationPoint { step, loss: val });
                if val < trace.best_validation {
                    trace.best_validation = val;
                    trace.best_step = step;
                    best.copy_from_slice(&params);
                }
            }
        }
    }
    if step > 0 && step % eval_every != 0 {
        let val = val_fn(model);
        trace.validation.push(ValidationPoint { step, loss: val });
        if val < trace.best_validation {
            trace.best_validation = val;
            trace.best_step = step;
            best.copy_from_slice(&params);
        }
    }
    model.load_flat(&best);
    Ok(trace)
}

/// Fixed random subset of `len` indices, drawn once per run.
pub fn validation_subset(len: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut substream(seed, "train/validation-subset"));
    idx.truncate(size.min(len).max(1.min(len)));
    idx
}

/// Training objective for the toy transformer.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Mean negative log-likelihood of the labels.
    Nll,
    /// MSE between the mean-pooled last-block output and per-sample targets
    /// (`m x d` for the training and validation sets).
    MseToTargets {
        train: Array2<f64>,
        validation: Array2<f64>,
    },
}

/// Trains every parameter of `model` on `objective`.
pub fn train(
    model: &mut ToyTransformer,
    train_data: &SynthDataset,
    validation: &SynthDataset,
    objective: &Objective,
    opts: &TrainOptions,
) -> Result<LossTrace> {
    let t = model.config.frames;
    let val_idx = validation_subset(validation.len(), opts.val_subset, opts.seed);
    let val_x = validation.batch(&val_idx);
    let val_labels = validation.batch_labels(&val_idx);

    match objective {
        Objective::Nll => fit(
            model,
            train_data.len(),
            opts,
            &["nll"],
            |m, batch| {
                let (loss, grad) = m.nll_loss_grad(&train_data.batch(batch), &train_data.batch_labels(batch));
                (vec![loss], grad)
            },
            |m| {
                let trace = m.forward_trace(&val_x);
                layers::nll(&trace.log_probs, &val_labels).0
            },
        ),
        Objective::MseToTargets {
            train: targets,
            validation: val_targets,
        } => {
            let val_t = val_targets.select(Axis(0), &val_idx);
            fit(
                model,
                train_data.len(),
                opts,
                &["mse"],
                |m, batch| {
                    let trace = m.forward_trace(&train_data.batch(batch));
                    let pooled = layers::mean_pool(trace.hidden.last().expect("blocks"), t);
                    let (loss, dpooled) = layers::mse(&pooled, &targets.select(Axis(0), batch).view());
                    let dh = layers::mean_pool_backward(&dpooled, t);
                    (vec![loss], m.backward(&trace, None, Some(&dh)))
                },
                |m| {
                    let h = m.block_outputs(&val_x);
                    let pooled = layers::mean_pool(h.last().expect("blocks"), t);
                    layers::mse(&pooled, &val_t.view()).0
                },
            )
        }
    }
}
