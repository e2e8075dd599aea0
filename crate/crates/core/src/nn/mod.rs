//! Softmax classifier substrate: multinomial logistic regression, optionally
//! with one `tanh` hidden layer, trained by seeded mini-batch SGD on mean
//! cross-entropy.
//!
//! Parameter layout (flat, row-major):
//!
//! - `hidden_dim == 0`: `W [N x d]`, `b [N]`
//! - `hidden_dim == h > 0`: `W1 [h x d]`, `b1 [h]`, `W2 [N x h]`, `b2 [N]`

mod dataset;

pub use dataset::{LabeledDataset, UnlabeledDataset};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, seeded_rng};

/// Probabilities below this are clamped before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn logistic(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, 0, num_classes)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_count(&self) -> usize {
        let (d, h, n) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h == 0 {
            d * n + n
        } else {
            d * h + h + h * n + n
        }
    }

    /// Width of the layer feeding the output logits.
    fn penultimate_dim(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }
}

/// Offsets into the flat parameter vector.
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn of(arch: &Architecture) -> Self {
        let (d, h, n) = (arch.input_dim, arch.hidden_dim, arch.num_classes);
        if h == 0 {
            // Single affine map stored in the "output" slots.
            Layout {
                w1: 0,
                b1: 0,
                w2: 0,
                b2: d * n,
            }
        } else {
            let b1 = d * h;
            let w2 = b1 + h;
            Layout {
                w1: 0,
                b1,
                w2,
                b2: w2 + h * n,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn from_weights(arch: Architecture, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                context: "ModelParams::from_weights",
                expected: arch.param_count(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        Ok(Self { arch, weights })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            weights: vec![0.0; arch.param_count()],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    fn check_input_width(&self, width: usize, context: &'static str) -> Result<()> {
        if width != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.arch.input_dim,
                got: width,
            });
        }
        Ok(())
    }

    fn check_labels(&self, data: &LabeledDataset, context: &'static str) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset(context));
        }
        self.check_input_width(data.input_dim(), context)?;
        if data.num_classes() != self.arch.num_classes {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.arch.num_classes,
                got: data.num_classes(),
            });
        }
        Ok(())
    }

    /// Writes the hidden activations (if any) and output logits for one sample.
    fn logits_into(&self, x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let arch = &self.arch;
        let lay = Layout::of(arch);
        let w = &self.weights;
        let input: &[f64] = if arch.hidden_dim == 0 {
            x
        } else {
            let d = arch.input_dim;
            for (j, hj) in hidden.iter_mut().enumerate() {
                let row = &w[lay.w1 + j * d..lay.w1 + (j + 1) * d];
                let z = w[lay.b1 + j] + dot(row, x);
                *hj = z.tanh();
            }
            hidden
        };
        let p = arch.penultimate_dim();
        for (n, out) in logits.iter_mut().enumerate() {
            let row = &w[lay.w2 + n * p..lay.w2 + (n + 1) * p];
            *out = w[lay.b2 + n] + dot(row, input);
        }
    }

    fn probs_into(&self, x: &[f64], hidden: &mut [f64], probs: &mut [f64]) {
        self.logits_into(x, hidden, probs);
        softmax_in_place(probs);
    }

    /// Gradient of the mean cross-entropy over the selected samples.
    fn batch_gradient(&self, data: &LabeledDataset, indices: &[usize], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let arch = &self.arch;
        let lay = Layout::of(arch);
        let (d, h, n_cls) = (arch.input_dim, arch.hidden_dim, arch.num_classes);
        let p = arch.penultimate_dim();
        let mut hidden = vec![0.0; h];
        let mut delta = vec![0.0; n_cls];
        let mut back = vec![0.0; h];

        for &i in indices {
            let (x, y) = data.sample(i);
            self.probs_into(x, &mut hidden, &mut delta);
            delta[y] -= 1.0;
            let input: &[f64] = if h == 0 { x } else { &hidden };
            for (n, &dn) in delta.iter().enumerate() {
                let row = &mut grad[lay.w2 + n * p..lay.w2 + (n + 1) * p];
                axpy(dn, input, row);
                grad[lay.b2 + n] += dn;
            }
            if h > 0 {
                for (j, bj) in back.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (n, &dn) in delta.iter().enumerate() {
                        s += self.weights[lay.w2 + n * p + j] * dn;
                    }
                    *bj = s * (1.0 - hidden[j] * hidden[j]);
                }
                for (j, &bj) in back.iter().enumerate() {
                    let row = &mut grad[lay.w1 + j * d..lay.w1 + (j + 1) * d];
                    axpy(bj, x, row);
                    grad[lay.b1 + j] += bj;
                }
            }
        }
        let scale = 1.0 / indices.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weights drawn i.i.d. from `U(-0.05, 0.05)`.
pub fn init_params(arch: Architecture, seed: u64) -> ModelParams {
    let mut rng = seeded_rng(seed);
    let weights = (0..arch.param_count())
        .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
        .collect();
    ModelParams { arch, weights }
}

/// Row-wise softmax class probabilities.
pub fn forward_probs(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    params.check_input_width(features.cols(), "forward_probs")?;
    let n_cls = params.arch.num_classes;
    let mut out = Matrix::zeros(features.rows(), n_cls);
    let mut hidden = vec![0.0; params.arch.hidden_dim];
    for (i, x) in features.iter_rows().enumerate() {
        params.probs_into(x, &mut hidden, out.row_mut(i));
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    params.check_labels(data, "ce_loss")?;
    let mut hidden = vec![0.0; params.arch.hidden_dim];
    let mut probs = vec![0.0; params.arch.num_classes];
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        params.probs_into(x, &mut hidden, &mut probs);
        total -= probs[y].max(PROB_FLOOR).ln();
    }
    Ok(total / data.len() as f64)
}

/// Analytic gradient of [`ce_loss`] with respect to the flat parameter vector.
pub fn ce_gradient(params: &ModelParams, data: &LabeledDataset) -> Result<Vec<f64>> {
    params.check_labels(data, "ce_gradient")?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; params.weights.len()];
    params.batch_gradient(data, &indices, &mut grad);
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Plain mini-batch SGD. Each epoch draws a fresh permutation from a stream
/// derived from `(seed, epoch)`; the final partial batch is kept.
pub fn sgd_train(params: &ModelParams, data: &LabeledDataset, config: &SgdConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    params.check_labels(data, "sgd_train")?;
    let mut model = params.clone();
    let mut grad = vec![0.0; model.weights.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(derive_seed(seed, &[epoch as u64])));
        for batch in order.chunks(config.batch_size) {
            model.batch_gradient(data, batch, &mut grad);
            axpy(-config.lr, &grad, &mut model.weights);
        }
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid(
            "training diverged to non-finite parameters; lower the learning rate",
        ));
    }
    Ok(model)
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(params: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    params.check_labels(data, "accuracy")?;
    let probs = forward_probs(params, data.features())?;
    let correct = probs
        .iter_rows()
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_data(seed: u64, rows: usize, dim: usize, classes: usize) -> LabeledDataset {
        let mut rng = seeded_rng(seed);
        let feats: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        LabeledDataset::new(Matrix::from_vec(rows, dim, feats).unwrap(), labels, classes).unwrap()
    }

    fn random_params(arch: Architecture, seed: u64, scale: f64) -> ModelParams {
        let mut rng = seeded_rng(seed);
        let w = (0..arch.param_count())
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        ModelParams::from_weights(arch, w).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(Architecture::new(4, 0, 3).unwrap().param_count(), 15);
        assert_eq!(Architecture::new(4, 5, 3).unwrap().param_count(), 4 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn architecture_rejects_degenerate_shapes() {
        assert!(Architecture::new(0, 0, 3).is_err());
        assert!(Architecture::new(4, 0, 1).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let arch = Architecture::logistic(4, 3).unwrap();
        let a = init_params(arch, 7);
        assert_eq!(a, init_params(arch, 7));
        assert_ne!(a, init_params(arch, 8));
        assert!(a.weights().iter().all(|w| w.abs() < 0.05));
    }

    #[test]
    fn zero_model_is_uniform() {
        let arch = Architecture::new(3, 2, 4).unwrap();
        let data = toy_data(1, 6, 3, 4);
        let probs = forward_probs(&ModelParams::zeros(arch), data.features()).unwrap();
        for row in probs.iter_rows() {
            for &p in row {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dominant_class_weights_give_confident_prediction() {
        // W = 0, b = [10, 0, 0]: p0 = e^10 / (e^10 + 2).
        let arch = Architecture::logistic(2, 3).unwrap();
        let mut w = vec![0.0; arch.param_count()];
        w[6] = 10.0;
        let params = ModelParams::from_weights(arch, w).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let probs = forward_probs(&params, &x).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 2.0);
        assert_eq!(argmax(probs.row(0)), 0);
        assert!(probs.get(0, 0) > 0.99);
        assert!((probs.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let arch = Architecture::logistic(3, 2).unwrap();
        let x = Matrix::zeros(2, 4);
        assert!(matches!(
            forward_probs(&ModelParams::zeros(arch), &x),
            Err(Error::DimensionMismatch {
                expected: 3,
                got: 4,
                ..
            })
        ));
    }

    #[test]
    fn zero_model_loss_is_ln_n() {
        let arch = Architecture::logistic(5, 10).unwrap();
        let data = toy_data(3, 17, 5, 10);
        let loss = ce_loss(&ModelParams::zeros(arch), &data).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_full_accuracy() {
        // Label = sign of x0; huge weights saturate the softmax.
        let arch = Architecture::logistic(1, 2).unwrap();
        let params = ModelParams::from_weights(arch, vec![-1000.0, 1000.0, 0.0, 0.0]).unwrap();
        let xs: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let labels = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
        let data = LabeledDataset::new(Matrix::from_vec(10, 1, xs).unwrap(), labels, 2).unwrap();
        assert_eq!(ce_loss(&params, &data).unwrap(), 0.0);
        assert_eq!(accuracy(&params, &data).unwrap(), 1.0);
    }

    #[test]
    fn loss_matches_per_sample_oracle() {
        let arch = Architecture::logistic(3, 4).unwrap();
        let params = random_params(arch, 11, 1.0);
        let data = toy_data(12, 5, 3, 4);
        // Straight-line oracle: logits, log-sum-exp, -log p.
        let w = params.weights();
        let mut total = 0.0;
        for i in 0..5 {
            let (x, y) = data.sample(i);
            let logits: Vec<f64> = (0..4)
                .map(|n| w[12 + n] + (0..3).map(|k| w[n * 3 + k] * x[k]).sum::<f64>())
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            total += lse - logits[y];
        }
        let oracle = total / 5.0;
        assert!((ce_loss(&params, &data).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let arch = Architecture::logistic(2, 2).unwrap();
        let empty = LabeledDataset::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        let params = ModelParams::zeros(arch);
        assert!(matches!(ce_loss(&params, &empty), Err(Error::EmptyDataset(_))));
        assert!(matches!(accuracy(&params, &empty), Err(Error::EmptyDataset(_))));
        let cfg = SgdConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.1,
        };
        assert!(matches!(
            sgd_train(&params, &empty, &cfg, 0),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn zero_model_accuracy_uses_lowest_index_tiebreak() {
        let arch = Architecture::logistic(2, 3).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 1, 2];
        let data = LabeledDataset::new(Matrix::zeros(10, 2), labels, 3).unwrap();
        assert!((accuracy(&ModelParams::zeros(arch), &data).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let arch = Architecture::new(3, 4, 3).unwrap();
        let params = random_params(arch, 5, 0.5);
        let data = toy_data(6, 20, 3, 3);
        let cfg = SgdConfig {
            epochs: 3,
            batch_size: 7,
            lr: 0.0,
        };
        assert_eq!(sgd_train(&params, &data, &cfg, 99).unwrap(), params);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        // Two well separated blobs on the first axis.
        let mut rng = seeded_rng(21);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..80 {
            let y = i % 2;
            let center = if y == 0 { -2.0 } else { 2.0 };
            feats.push(center + rng.random_range(-0.5..0.5));
            feats.push(rng.random_range(-1.0..1.0));
            labels.push(y);
        }
        let data = LabeledDataset::new(Matrix::from_vec(80, 2, feats).unwrap(), labels, 2).unwrap();
        let arch = Architecture::logistic(2, 2).unwrap();
        let start = init_params(arch, 1);
        let cfg = SgdConfig {
            epochs: 20,
            batch_size: 8,
            lr: 0.1,
        };
        let a = sgd_train(&start, &data, &cfg, 3).unwrap();
        let b = sgd_train(&start, &data, &cfg, 3).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert!(ce_loss(&a, &data).unwrap() < ce_loss(&start, &data).unwrap());
        assert!(accuracy(&a, &data).unwrap() > 0.95);
    }

    #[test]
    fn sgd_rejects_bad_hyperparameters() {
        let arch = Architecture::logistic(2, 2).unwrap();
        let data = toy_data(1, 4, 2, 2);
        let p = ModelParams::zeros(arch);
        for cfg in [
            SgdConfig {
                epochs: 0,
                batch_size: 1,
                lr: 0.1,
            },
            SgdConfig {
                epochs: 1,
                batch_size: 0,
                lr: 0.1,
            },
            SgdConfig {
                epochs: 1,
                batch_size: 1,
                lr: -0.1,
            },
            SgdConfig {
                epochs: 1,
                batch_size: 1,
                lr: f64::NAN,
            },
        ] {
            assert!(sgd_train(&p, &data, &cfg, 0).is_err());
        }
    }

    /// Central finite differences of the loss, one coordinate at a time.
    fn numeric_gradient(params: &ModelParams, data: &LabeledDataset, step: f64) -> Vec<f64> {
        (0..params.weights().len())
            .map(|i| {
                let mut plus = params.weights().to_vec();
                let mut minus = plus.clone();
                plus[i] += step;
                minus[i] -= step;
                let lp = ce_loss(&ModelParams::from_weights(*params.arch(), plus).unwrap(), data).unwrap();
                let lm = ce_loss(&ModelParams::from_weights(*params.arch(), minus).unwrap(), data).unwrap();
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_finite_differences(
            seed in 0u64..10_000,
            dim in 1usize..4,
            hidden in 0usize..4,
            classes in 2usize..5,
        ) {
            let arch = Architecture::new(dim, hidden, classes).unwrap();
            let params = random_params(arch, seed, 0.8);
            let data = toy_data(seed ^ 0xABCD, 6, dim, classes);
            let analytic = ce_gradient(&params, &data).unwrap();
            let numeric = numeric_gradient(&params, &data, 1e-5);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
                .max(1e-8);
            prop_assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
        }

        #[test]
        fn probability_rows_normalize(seed in 0u64..10_000, scale in 0.01f64..20.0) {
            let arch = Architecture::new(3, 2, 5).unwrap();
            let params = random_params(arch, seed, scale);
            let data = toy_data(seed + 1, 8, 3, 5);
            let probs = forward_probs(&params, data.features()).unwrap();
            for row in probs.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            let loss = ce_loss(&params, &data).unwrap();
            prop_assert!(loss >= 0.0 && loss.is_finite());
            let acc = accuracy(&params, &data).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
