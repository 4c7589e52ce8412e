//! Single-sample inference timing.
//!
//! Each measured forward pass runs on the calling thread after a warm-up of
//! `warmup_steps` untimed passes. Only ratios between models are meaningful.

use std::hint::black_box;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Predictor;

pub const DEFAULT_WARMUP: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup_steps: usize,
    pub measured_runs: usize,
    pub mean_seconds: f64,
    pub std_error_seconds: f64,
    /// Mean time divided by the reference mean (1 without a reference).
    pub normalized_time: f64,
}

impl TimingReport {
    /// The same measurement expressed relative to `reference`.
    pub fn normalized_to(&self, reference: &TimingReport) -> TimingReport {
        TimingReport {
            normalized_time: if reference.mean_seconds > 0.0 {
                self.mean_seconds / reference.mean_seconds
            } else {
                1.0
            },
            ..self.clone()
        }
    }
}

/// Times one forward pass per sample in `samples`.
pub fn time_inference<P: Predictor + ?Sized>(
    model: &P,
    samples: &[Array2<f64>],
    warmup_steps: usize,
    reference: Option<&TimingReport>,
) -> TimingReport {
    if !samples.is_empty() {
        for i in 0..warmup_steps {
            black_box(model.predict_batch(&samples[i % samples.len()]));
        }
    }
    let times: Vec<f64> = samples
        .iter()
        .map(|x| {
            let start = Instant::now();
            black_box(model.predict_batch(black_box(x)));
            start.elapsed().as_secs_f64()
        })
        .collect();
    let n = times.len();
    let mean = if n > 0 { times.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let std_error = if n > 1 {
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let report = TimingReport {
        warmup_steps,
        measured_runs: n,
        mean_seconds: mean,
        std_error_seconds: std_error,
        normalized_time: 1.0,
    };
    match reference {
        Some(r) => report.normalized_to(r),
        None => report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_dataset, ToyConfig, ToyTransformer};

    #[test]
    fn self_reference_and_warmup_recorded() {
        let cfg = ToyConfig {
            num_blocks: 2,
            dim: 8,
            heads: 2,
            ff_dim: 8,
            frames: 8,
            input_dim: 3,
            classes: 4,
            seed: 2,
        };
        let m = ToyTransformer::new(cfg).unwrap();
        let [_, _, test] = generate_dataset(&cfg, 8);
        let samples: Vec<_> = (0..8).map(|i| test.sample(i)).collect();
        let cold = time_inference(&m, &samples, 0, None);
        assert_eq!(cold.warmup_steps, 0);
        assert_eq!(cold.normalized_time, 1.0);
        let warm = time_inference(&m, &samples, 300, None);
        assert_eq!(warm.warmup_steps, 300);
        assert_eq!(warm.measured_runs, 8);
        let against_self = time_inference(&m, &samples, 0, Some(&warm));
        assert!(against_self.normalized_time > 0.0);
        assert_eq!(warm.normalized_to(&warm).normalized_time, 1.0);
    }
}
