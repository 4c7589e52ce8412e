//! Synthetic sequence-classification data.
//!
//! Every class owns a smooth multichannel template: a Hann-windowed sinusoid
//! per input channel with class-specific frequency, phases and gains, shifted
//! so that each channel sums to zero over time. A sample is Gaussian noise
//! with the template of its class added at a uniformly random frame offset.
//! Because the templates have zero temporal mean, the time-averaged input
//! carries no class information; recognising a class needs a nonlinear
//! per-frame or cross-frame computation.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyConfig;
use crate::rng::substream;

pub const DEFAULT_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub split: Split,
    /// `m x T x D`
    pub inputs: Array3<f64>,
    pub labels: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.inputs.dim().1
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dim().2
    }

    /// Samples `indices` stacked into a `(B*T) x D` matrix.
    pub fn batch(&self, indices: &[usize]) -> Array2<f64> {
        let (_, t, d) = self.inputs.dim();
        let mut out = Array2::zeros((indices.len() * t, d));
        for (b, &i) in indices.iter().enumerate() {
            out.slice_mut(s![b * t..(b + 1) * t, ..])
                .assign(&self.inputs.index_axis(Axis(0), i));
        }
        out
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn sample(&self, i: usize) -> Array2<f64> {
        self.inputs.index_axis(Axis(0), i).to_owned()
    }

    /// First `m` samples (or all, if fewer).
    pub fn truncated(&self, m: usize) -> SynthDataset {
        let m = m.min(self.len());
        SynthDataset {
            split: self.split,
            inputs: self.inputs.slice(s![..m, .., ..]).to_owned(),
            labels: self.labels[..m].to_vec(),
            offsets: self.offsets[..m].to_vec(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Template length in frames for a sequence of `frames` frames.
pub fn template_len(frames: usize) -> usize {
    (frames * 3 / 8).clamp(2, frames)
}

/// One `W x D` template per class, derived from the config seed only.
pub fn class_templates(config: &ToyConfig) -> Vec<Array2<f64>> {
    let mut rng = substream(config.seed, "data/templates");
    let w = template_len(config.frames);
    let hann: Vec<f64> = (0..w)
        .map(|t| (PI * (t as f64 + 0.5) / w as f64).sin().powi(2))
        .collect();
    let hann_sum: f64 = hann.iter().sum();
    (0..config.classes)
        .map(|_| {
            let cycles = rng.random_range(0.75..2.0);
            let mut tpl = Array2::zeros((w, config.input_dim));
            for j in 0..config.input_dim {
                let phase = rng.random_range(0.0..2.0 * PI);
                let gain = rng.random_range(0.6..1.4);
                let wave: Vec<f64> = (0..w)
                    .map(|t| (2.0 * PI * cycles * (t as f64 + 0.5) / w as f64 + phase).sin())
                    .collect();
                let mean = wave.iter().zip(&hann).map(|(a, b)| a * b).sum::<f64>() / hann_sum;
                for t in 0..w {
                    tpl[[t, j]] = gain * hann[t] * (wave[t] - mean);
                }
            }
            tpl
        })
        .collect()
}

/// Train, validation and test splits of `m_per_split` samples each, with
/// noise standard deviation 0.5.
pub fn generate_dataset(config: &ToyConfig, m_per_split: usize) -> [SynthDataset; 3] {
    generate_dataset_with_noise(config, m_per_split, DEFAULT_NOISE)
}

pub fn generate_dataset_with_noise(config: &ToyConfig, m_per_split: usize, sigma: f64) -> [SynthDataset; 3] {
    generate_splits(config, [m_per_split; 3], sigma)
}

/// Train, validation and test splits with their own sizes. Each split draws
/// from its own random stream, so a split does not depend on the sizes of
/// the others.
pub fn generate_splits(config: &ToyConfig, sizes: [usize; 3], sigma: f64) -> [SynthDataset; 3] {
    assert!(
        sizes.iter().all(|&m| m >= config.classes),
        "need at least one sample per class per split"
    );
    let templates = class_templates(config);
    let splits = [Split::Train, Split::Validation, Split::Test];
    std::array::from_fn(|i| generate_split(config, &templates, splits[i], sizes[i], sigma))
}

fn generate_split(
    config: &ToyConfig,
    templates: &[Array2<f64>],
    split: Split,
    m: usize,
    sigma: f64,
) -> SynthDataset {
    let mut rng = substream(config.seed, &format!("data/{}", split.name()));
    let (t, d) = (config.frames, config.input_dim);
    let w = template_len(t);
    let mut labels: Vec<usize> = (0..m).map(|i| i % config.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, sigma.max(0.0)).unwrap();
    let mut inputs = Array3::zeros((m, t, d));
    let mut offsets = Vec::with_capacity(m);
    for (i, &label) in labels.iter().enumerate() {
        let mut sample = inputs.index_axis_mut(Axis(0), i);
        if sigma > 0.0 {
            sample.mapv_inplace(|_| noise.sample(&mut rng));
        }
        let offset = rng.random_range(0..=t - w);
        let mut window = sample.slice_mut(s![offset..offset + w, ..]);
        window += &templates[label];
        offsets.push(offset);
    }
    SynthDataset {
        split,
        inputs,
        labels,
        offsets,
    }
}
