//! Supervised-learning substrate: datasets, a multinomial logistic-regression
//! classifier, mini-batch SGD and accuracy evaluation.
//!
//! Everything here is a pure function of its inputs. Randomness (batch order,
//! synthetic data) is drawn from generators keyed by explicit seeds.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::seed::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("dimension mismatch: expected {expected:?} (classes, dim), found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}

pub type Result<T> = std::result::Result<T, MlError>;

/// Labeled feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(MlError::InvalidDataset(
                "dim and num_classes must be at least 1".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(MlError::InvalidDataset(format!(
                "{} feature values do not form {} rows of dim {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MlError::InvalidDataset(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(MlError::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(MlError::InvalidDataset("ragged feature rows".into()));
        }
        if rows.len() != labels.len() {
            return Err(MlError::InvalidDataset(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        Self::new(rows.concat(), labels, dim, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Same features, new labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(MlError::InvalidDataset(format!(
                "{} labels for {} rows",
                labels.len(),
                self.len()
            )));
        }
        Self::new(self.features.clone(), labels, self.dim, self.num_classes)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }
}

/// Parameters of a linear softmax classifier: a `K x d` weight matrix
/// (row-major) followed by `K` biases, in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    num_classes: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            values: vec![0.0; num_classes * dim + num_classes],
        }
    }

    pub fn from_parts(
        num_classes: usize,
        dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != num_classes * dim || biases.len() != num_classes {
            return Err(MlError::InvalidDataset(format!(
                "expected {} weights and {} biases, got {} and {}",
                num_classes * dim,
                num_classes,
                weights.len(),
                biases.len()
            )));
        }
        let mut values = weights;
        values.extend(biases);
        Ok(Self {
            num_classes,
            dim,
            values,
        })
    }

    /// Build from a flat buffer laid out as `[weights..., biases...]`.
    pub fn from_flat(num_classes: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_classes * dim + num_classes {
            return Err(MlError::InvalidDataset(format!(
                "flat parameter buffer has {} entries, expected {}",
                values.len(),
                num_classes * dim + num_classes
            )));
        }
        Ok(Self {
            num_classes,
            dim,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_classes, self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.values[..self.num_classes * self.dim]
    }

    pub fn biases(&self) -> &[f64] {
        &self.values[self.num_classes * self.dim..]
    }

    /// All entries, weights first.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            num_classes: self.num_classes,
            dim: self.dim,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        check_shape(self.shape(), other.shape())?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Raw class scores `W x + b` for one feature row.
    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let (w, b) = self.values.split_at(self.num_classes * self.dim);
        w.chunks_exact(self.dim)
            .zip(b)
            .map(|(wk, bk)| wk.iter().zip(row).map(|(a, x)| a * x).sum::<f64>() + bk)
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, row: &[f64]) -> usize {
        let scores = self.scores(row);
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = k;
            }
        }
        best
    }

    fn check_matches(&self, data: &Dataset) -> Result<()> {
        check_shape(self.shape(), (data.num_classes, data.dim))
    }
}

fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(MlError::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Checks the config against a dataset of `n` rows.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(MlError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(MlError::InvalidConfig(format!(
                "batch_size {} not in [1, {n}]",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Softmax of `scores` in place, with max subtraction. Returns log-sum-exp.
fn softmax_in_place(scores: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy gradient over `indices` of `data`, accumulated into a
/// fresh parameter-shaped buffer. Also returns the mean loss.
fn gradient_over(params: &ModelParams, data: &Dataset, indices: &[usize]) -> (ModelParams, f64) {
    let (k, d) = params.shape();
    let mut grad = ModelParams::zeros(k, d);
    let mut loss = 0.0;
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        let x = data.row(i);
        let y = data.label(i);
        let mut probs = params.scores(x);
        let logit_y = probs[y];
        let lse = softmax_in_place(&mut probs);
        loss += lse - logit_y;
        probs[y] -= 1.0;
        let (gw, gb) = grad.values.split_at_mut(k * d);
        for (c, residual) in probs.iter().enumerate() {
            for (g, xj) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                *g += residual * xj;
            }
            gb[c] += residual;
        }
    }
    for g in grad.values.iter_mut() {
        *g *= scale;
    }
    (grad, loss * scale)
}

/// Mean gradient of the multinomial cross-entropy loss over `batch`.
pub fn compute_gradient(params: &ModelParams, batch: &Dataset) -> Result<ModelParams> {
    params.check_matches(batch)?;
    if batch.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    Ok(gradient_over(params, batch, &indices).0)
}

/// Mean multinomial cross-entropy of `params` on `data`.
pub fn loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    params.check_matches(data)?;
    if data.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let total: f64 = (0..data.len())
        .map(|i| {
            let mut s = params.scores(data.row(i));
            let logit_y = s[data.label(i)];
            softmax_in_place(&mut s) - logit_y
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Mini-batch SGD on cross-entropy, starting from `init`.
///
/// Each epoch visits the rows in an order drawn by a Fisher-Yates shuffle
/// keyed on `(cfg.seed, epoch)`; the final batch of an epoch may be short.
pub fn train_local(data: &Dataset, init: &ModelParams, cfg: &TrainConfig) -> Result<ModelParams> {
    init.check_matches(data)?;
    if data.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    cfg.validate(data.len())?;

    let mut params = init.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[epoch as u64]));
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (grad, batch_loss) = gradient_over(&params, data, batch);
            if !batch_loss.is_finite() {
                return Err(MlError::NonFiniteLoss { epoch, step });
            }
            params.add_scaled(-cfg.learning_rate, &grad)?;
            if !params.is_finite() {
                return Err(MlError::NonFiniteLoss { epoch, step });
            }
        }
    }
    Ok(params)
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate(params: &ModelParams, test: &Dataset) -> Result<f64> {
    params.check_matches(test)?;
    if test.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let correct = (0..test.len())
        .filter(|&i| params.predict(test.row(i)) == test.label(i))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Target upper bound on the Bayes error of a synthetic task.
const TARGET_BAYES_ERROR: f64 = 0.1;

/// A Gaussian-blob classification task: one unit-variance cluster per class.
///
/// Centers are drawn from a standard normal and rescaled so the closest pair
/// sits `2z` apart, where `(K - 1) * P(N(0,1) > z) = 0.1`. By the union bound
/// over competing classes the Bayes error is then at most 10%.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    num_classes: usize,
    dim: usize,
    centers: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(MlError::InvalidDataset(
                "num_classes and dim must be at least 1".into(),
            ));
        }
        let mut rng = rng_for(seed, &[0xC3]);
        let mut centers: Vec<f64> = (0..num_classes * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        if num_classes > 1 {
            let min_dist = (0..num_classes)
                .flat_map(|a| ((a + 1)..num_classes).map(move |b| (a, b)))
                .map(|(a, b)| {
                    centers[a * dim..(a + 1) * dim]
                        .iter()
                        .zip(&centers[b * dim..(b + 1) * dim])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let tail = TARGET_BAYES_ERROR / (num_classes - 1) as f64;
            let z = Normal::standard().inverse_cdf(1.0 - tail);
            let scale = 2.0 * z / min_dist.max(f64::MIN_POSITIVE);
            for c in centers.iter_mut() {
                *c *= scale;
            }
        }
        Ok(Self {
            num_classes,
            dim,
            centers,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class * self.dim..(class + 1) * self.dim]
    }

    /// Draw exactly `per_class` rows of every class, then shuffle row order.
    pub fn sample(&self, per_class: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, &[0x5A]);
        let n = per_class * self.num_classes;
        let mut labels: Vec<usize> = (0..n).map(|i| i / per_class.max(1)).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            for &c in self.center(y) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(c + noise);
            }
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels,
        }
    }
}

/// Gaussian-blob dataset with `samples_per_class` rows per class.
pub fn make_synthetic_task(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if samples_per_class == 0 {
        return Err(MlError::InvalidDataset(
            "samples_per_class must be at least 1".into(),
        ));
    }
    Ok(SyntheticTask::new(num_classes, dim, seed)?.sample(samples_per_class, seed))
}
