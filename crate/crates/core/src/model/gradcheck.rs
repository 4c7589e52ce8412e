//! Central finite-difference checks for the hand-written backward passes.

use ndarray::Array2;
use rand::Rng;

use super::layers::{self, Layer, Params};

/// Relative errors use `max(|analytic|, |numeric|, GRAD_FLOOR)` as the
/// denominator so that exactly-zero gradients (e.g. key biases under
/// softmax) compare against rounding noise on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// A model fragment with a scalar loss on a fixed input.
pub trait Fragment: Params + Clone {
    fn loss(&self, input: &Array2<f64>) -> f64;
    /// Loss, parameter gradient and input gradient.
    fn loss_and_grad(&self, input: &Array2<f64>) -> (f64, Self, Array2<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_param_error: f64,
    pub max_input_error: f64,
    pub num_params: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Max relative error between analytic and central-difference gradients,
/// over every parameter and every input element.
pub fn gradient_check<F: Fragment>(fragment: &F, input: &Array2<f64>, epsilon: f64) -> f64 {
    gradient_check_report(fragment, input, epsilon).max_error()
}

pub fn gradient_check_report<F: Fragment>(fragment: &F, input: &Array2<f64>, epsilon: f64) -> GradCheckReport {
    let (_, grad, dinput) = fragment.loss_and_grad(input);
    let analytic = grad.flatten();
    let base = fragment.flatten();
    let mut probe = fragment.clone();
    let mut params = base.clone();
    let mut max_param_error: f64 = 0.0;
    for i in 0..params.len() {
        params[i] = base[i] + epsilon;
        probe.load_flat(&params);
        let up = probe.loss(input);
        params[i] = base[i] - epsilon;
        probe.load_flat(&params);
        let down = probe.loss(input);
        params[i] = base[i];
        let numeric = (up - down) / (2.0 * epsilon);
        max_param_error = max_param_error.max(relative_error(analytic[i], numeric));
    }

    let mut x = input.clone();
    let mut max_input_error: f64 = 0.0;
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        x.as_slice_mut().unwrap()[idx] = orig + epsilon;
        let up = fragment.loss(&x);
        x.as_slice_mut().unwrap()[idx] = orig - epsilon;
        let down = fragment.loss(&x);
        x.as_slice_mut().unwrap()[idx] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        max_input_error = max_input_error.max(relative_error(dinput.as_slice().unwrap()[idx], numeric));
    }
    GradCheckReport {
        max_param_error,
        max_input_error,
        num_params: base.len(),
    }
}

/// Wraps a layer with a fixed random linear read-out `sum(y * R)`.
#[derive(Clone)]
pub struct Probe<L: Layer> {
    pub layer: L,
    pub readout: Array2<f64>,
    pub seq_len: usize,
}

impl<L: Layer> Probe<L> {
    pub fn new<R: Rng + ?Sized>(layer: L, input: &Array2<f64>, seq_len: usize, rng: &mut R) -> Self {
        let out = layer.apply(input, seq_len);
        let readout = Array2::from_shape_simple_fn(out.dim(), || rng.random_range(-1.0..1.0));
        Probe {
            layer,
            readout,
            seq_len,
        }
    }
}

impl<L: Layer> Params for Probe<L> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layer.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layer.visit_mut(f)
    }
}

impl<L: Layer> Fragment for Probe<L> {
    fn loss(&self, input: &Array2<f64>) -> f64 {
        (&self.layer.apply(input, self.seq_len) * &self.readout).sum()
    }

    fn loss_and_grad(&self, input: &Array2<f64>) -> (f64, Self, Array2<f64>) {
        let (y, cache) = self.layer.forward(input, self.seq_len);
        let loss = (&y * &self.readout).sum();
        let mut grad = self.layer.zeros_like();
        let dx = self.layer.backward(&cache, &self.readout, &mut grad);
        (
            loss,
            Probe {
                layer: grad,
                readout: self.readout.clone(),
                seq_len: self.seq_len,
            },
            dx,
        )
    }
}

/// Classifier head followed by the mean NLL of fixed labels.
#[derive(Clone)]
pub struct NllProbe {
    pub classifier: layers::Classifier,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Params for NllProbe {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.classifier.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.classifier.visit_mut(f)
    }
}

impl Fragment for NllProbe {
    fn loss(&self, input: &Array2<f64>) -> f64 {
        layers::nll(&self.classifier.apply(input, self.seq_len), &self.labels).0
    }

    fn loss_and_grad(&self, input: &Array2<f64>) -> (f64, Self, Array2<f64>) {
        let (lp, cache) = self.classifier.forward(input, self.seq_len);
        let (loss, dlp) = layers::nll(&lp, &self.labels);
        let mut grad = self.classifier.zeros_like();
        let dx = self.classifier.backward(&cache, &dlp, &mut grad);
        (
            loss,
            NllProbe {
                classifier: grad,
                labels: self.labels.clone(),
                seq_len: self.seq_len,
            },
            dx,
        )
    }
}

/// A layer followed by mean pooling and MSE against fixed pooled targets.
#[derive(Clone)]
pub struct MseProbe<L: Layer> {
    pub layer: L,
    pub target: Array2<f64>,
    pub seq_len: usize,
}

impl<L: Layer> Params for MseProbe<L> {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.layer.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layer.visit_mut(f)
    }
}

impl<L: Layer> Fragment for MseProbe<L> {
    fn loss(&self, input: &Array2<f64>) -> f64 {
        let pooled = layers::mean_pool(&self.layer.apply(input, self.seq_len), self.seq_len);
        layers::mse(&pooled, &self.target.view()).0
    }

    fn loss_and_grad(&self, input: &Array2<f64>) -> (f64, Self, Array2<f64>) {
        let (y, cache) = self.layer.forward(input, self.seq_len);
        let pooled = layers::mean_pool(&y, self.seq_len);
        let (loss, dpooled) = layers::mse(&pooled, &self.target.view());
        let dy = layers::mean_pool_backward(&dpooled, self.seq_len);
        let mut grad = self.layer.zeros_like();
        let dx = self.layer.backward(&cache, &dy, &mut grad);
        (
            loss,
            MseProbe {
                layer: grad,
                target: self.target.clone(),
                seq_len: self.seq_len,
            },
            dx,
        )
    }
}

/// Checks every sublayer type on one random small configuration drawn from
/// `seed`. Returns the report per sublayer name.
pub fn sublayer_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    use super::layers::{Attention, Block, Classifier, Extractor, FeedForward, LayerNorm, Linear};
    use crate::mimic::LinearMimicLayer;

    let mut rng = crate::rng::substream(seed, "gradcheck/suite");
    let heads = rng.random_range(1..=2);
    let dim = heads * rng.random_range(2..=4);
    let ff = rng.random_range(3..=10);
    let seq_len = rng.random_range(2..=5);
    let batch = 2;
    let input_dim = rng.random_range(2..=4);
    let classes = rng.random_range(2..=5);
    let rows = batch * seq_len;
    let mut matrix = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.5..1.5));
    let x = matrix(rows, dim);
    let raw = matrix(rows, input_dim);
    let target = matrix(batch, dim);

    let mut rng = crate::rng::substream(seed, "gradcheck/suite/params");
    let eps = DEFAULT_EPSILON;
    let mut ln = LayerNorm::new(dim);
    ln.gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
    ln.offset.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let mut out = Vec::new();
    let p = Probe::new(Linear::new(dim, ff, &mut rng), &x, seq_len, &mut rng);
    out.push(("affine", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(ln, &x, seq_len, &mut rng);
    out.push(("layer_norm", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(Attention::new(dim, heads, &mut rng), &x, seq_len, &mut rng);
    out.push(("attention", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(FeedForward::new(dim, ff, &mut rng), &x, seq_len, &mut rng);
    out.push(("feedforward", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(Block::new(dim, heads, ff, &mut rng), &x, seq_len, &mut rng);
    out.push(("block", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(Extractor::new(input_dim, dim, seq_len, &mut rng), &raw, seq_len, &mut rng);
    out.push(("extractor", gradient_check_report(&p, &raw, eps)));
    let p = NllProbe {
        classifier: Classifier::new(dim, classes, &mut rng),
        labels,
        seq_len,
    };
    out.push(("classifier_nll", gradient_check_report(&p, &x, eps)));
    let p = Probe::new(LinearMimicLayer::new(dim, ff, true, &mut rng), &x, seq_len, &mut rng);
    out.push(("linear_mimic", gradient_check_report(&p, &x, eps)));
    let p = MseProbe {
        layer: FeedForward::new(dim, ff, &mut rng),
        target,
        seq_len,
    };
    out.push(("pooled_mse", gradient_check_report(&p, &x, eps)));
    out
}
