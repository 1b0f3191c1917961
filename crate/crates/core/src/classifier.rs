//! Softmax classifier on flattened images.
//!
//! Shared by the reference feature extractor (metrics) and the downstream
//! target classifier (augmentation evaluation).

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{DataError, LabeledImageSet};
use crate::nn::{
    adam_step, backward, forward, init_params, Activation, AdamState, LayerSpec, NetworkSpec,
    NnError, ParamSet, Real, Tensor,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

/// Rows evaluated per forward call outside training.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T = f32> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
}

impl Classifier<f32> {
    /// ReLU hidden layers, linear logits.
    pub fn new(prefix: &str, input: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let spec = NetworkSpec::mlp(prefix, &widths, Activation::Relu, Activation::Identity);
        let params = init_params(&spec, seed)?;
        Ok(Self { spec, params })
    }

    /// Rebuilds the layer list from stored weight shapes.
    pub fn from_params(prefix: &str, params: ParamSet<f32>) -> Result<Self> {
        let mut layers = Vec::new();
        let probe = NetworkSpec {
            prefix: prefix.to_owned(),
            layers: Vec::new(),
            embedding: None,
        };
        while let Ok(w) = params.get(&probe.weight_name(layers.len())) {
            if w.rank() != 2 {
                return Err(ClassifierError::Invalid(format!("weight {} is not a matrix", layers.len())));
            }
            layers.push(LayerSpec {
                input: w.shape()[1],
                output: w.shape()[0],
                activation: Activation::Relu,
                spectral_norm: false,
            });
        }
        if let Some(last) = layers.last_mut() {
            last.activation = Activation::Identity;
        }
        let spec = NetworkSpec {
            prefix: prefix.to_owned(),
            layers,
            embedding: None,
        };
        spec.validate()?;
        Ok(Self { spec, params })
    }
}

impl<T: Real> Classifier<T> {
    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.output_width()
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(forward(&self.spec, &self.params, x, None, None)?.0)
    }

    /// Activations of the last hidden layer.
    pub fn penultimate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trunk = self.spec.clone();
        trunk.layers.pop();
        if trunk.layers.is_empty() {
            return Ok(x.clone());
        }
        Ok(forward(&trunk, &self.params, x, None, None)?.0)
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}

fn set_tensor(set: &LabeledImageSet, indices: &[usize]) -> Tensor<f32> {
    Tensor::matrix(indices.len(), set.image_len(), set.unit_rows(indices)).expect("row-major rows")
}

impl Classifier<f32> {
    fn check_input(&self, set: &LabeledImageSet) -> Result<()> {
        if set.image_len() != self.input_width() {
            return Err(ClassifierError::Invalid(format!(
                "classifier takes {} inputs, images have {}",
                self.input_width(),
                set.image_len()
            )));
        }
        Ok(())
    }

    fn map_chunks(
        &self,
        set: &LabeledImageSet,
        f: impl Fn(&Self, &Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(set)?;
        let mut rows = Vec::with_capacity(set.len());
        let all: Vec<usize> = (0..set.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let out = f(self, &set_tensor(set, chunk))?;
            for r in 0..chunk.len() {
                rows.push(out.row(r).iter().map(|&v| f64::from(v)).collect());
            }
        }
        Ok(rows)
    }

    /// Raw logits for every image of `set`.
    pub fn scores(&self, set: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        self.map_chunks(set, |c, x| c.logits(x))
    }

    /// Softmax probabilities for every image of `set`.
    pub fn probabilities(&self, set: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        Ok(self.scores(set)?.iter().map(|r| softmax(r)).collect())
    }

    pub fn features(&self, set: &LabeledImageSet) -> Result<Vec<Vec<f64>>> {
        self.map_chunks(set, |c, x| c.penultimate(x))
    }

    /// Fraction of images whose arg-max class (lowest id on ties) matches
    /// the label.
    pub fn accuracy(&self, set: &LabeledImageSet) -> Result<f64> {
        let scores = self.scores(set)?;
        let correct = scores
            .iter()
            .enumerate()
            .filter(|(i, s)| argmax(s) == set.label(*i))
            .count();
        Ok(correct as f64 / set.len() as f64)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let n = logits.rows();
    let k = logits.cols();
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |a, &l| a + (l - max).exp());
        let log_z = max + sum.ln();
        loss += (log_z - row[y]) * inv_n;
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            *gv = (row[c] - log_z).exp() * inv_n;
        }
        g[y] -= inv_n;
    }
    (loss, grad)
}

/// Loss and parameter gradients on one batch.
pub fn batch_gradients<T: Real>(
    clf: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, ParamSet<T>)> {
    let (out, cache) = forward(&clf.spec, &clf.params, x, None, None)?;
    let (loss, grad) = softmax_cross_entropy(&out, labels);
    let (grads, _) = backward(&clf.spec, &clf.params, &cache, &grad)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub classifier: Classifier<f32>,
    /// Validation accuracy of the returned parameters (`None` without a
    /// validation set).
    pub val_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
}

/// Per-image transform applied when a batch is loaded: `(image, seed)`.
pub type BatchTransform<'a> = &'a dyn Fn(&[u8], u64) -> Vec<u8>;

/// Mini-batch Adam on softmax cross-entropy. With a validation set the
/// parameters of the best validation epoch are returned (first on ties),
/// otherwise the final ones.
pub fn fit(
    mut clf: Classifier<f32>,
    train: &LabeledImageSet,
    val: Option<&LabeledImageSet>,
    cfg: &FitConfig,
    transform: Option<BatchTransform<'_>>,
) -> Result<FitOutcome> {
    clf.check_input(train)?;
    if train.num_classes() > clf.num_classes() {
        return Err(ClassifierError::Invalid(format!(
            "{} training classes for a {}-way classifier",
            train.num_classes(),
            clf.num_classes()
        )));
    }
    if let Some(v) = val {
        clf.check_input(v)?;
        if v.num_classes() > clf.num_classes() {
            return Err(ClassifierError::Invalid("validation labels outside the classifier's range".into()));
        }
    }
    if cfg.batch_size == 0 {
        return Err(ClassifierError::Invalid("batch size must be positive".into()));
    }
    let mut adam = AdamState::new(&clf.params);
    let mut rng = rng::stream(cfg.seed, rng::key("classifier-shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = val.map(|v| clf.accuracy(v)).transpose()?;
    let mut best_params = clf.params.clone();
    let mut best_epoch = 0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = match transform {
                Some(t) => {
                    let mut rows = Vec::with_capacity(chunk.len() * train.image_len());
                    for (j, &i) in chunk.iter().enumerate() {
                        let key = rng::mix(rng::mix(epoch as u64, b as u64), j as u64);
                        let img = t(train.image(i), rng::mix(cfg.seed, key));
                        rows.extend(img.iter().map(|&p| f32::from(p) / 255.0));
                    }
                    Tensor::matrix(chunk.len(), train.image_len(), rows)?
                }
                None => set_tensor(train, chunk),
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
            let (loss, grads) = batch_gradients(&clf, &x, &labels)?;
            if !loss.is_finite() {
                return Err(ClassifierError::Diverged { epoch });
            }
            adam_step(&mut clf.params, &grads, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, 1e-8)?;
            epoch_loss += f64::from(loss);
            batches += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
        if let (Some(v), Some(b)) = (val, best) {
            let acc = clf.accuracy(v)?;
            if acc > b {
                best = Some(acc);
                best_params = clf.params.clone();
                best_epoch = epoch + 1;
            }
        }
    }
    if val.is_some() {
        clf.params = best_params;
    } else {
        best_epoch = cfg.epochs;
    }
    Ok(FitOutcome {
        classifier: clf,
        val_accuracy: best,
        best_epoch,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numeric_gradient};

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let clf = Classifier::new("c", 5, &[6, 4], 3, 2).unwrap().cast::<f64>();
        let x = Tensor::from_fn(&[4, 5], |i| ((i * 13 % 7) as f64 - 3.0) / 3.0);
        let labels = [0, 2, 1, 2];
        let (_, analytic) = batch_gradients(&clf, &x, &labels).unwrap();
        let numeric = numeric_gradient(
            &clf.params,
            |p| {
                let c = Classifier { spec: clf.spec.clone(), params: p.clone() };
                batch_gradients(&c, &x, &labels).unwrap().0
            },
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn from_params_round_trip() {
        let c = Classifier::new("ref", 16, &[8, 4], 3, 1).unwrap();
        let d = Classifier::from_params("ref", c.params.clone()).unwrap();
        assert_eq!(c, d);
    }
}
