//! Stacking combiner for two base classifiers.
//!
//! A discrete base model contributes a one-hot vector, a probabilistic one
//! contributes a distribution; the concatenation (discrete first) feeds a
//! multinomial linear classifier trained by full-batch gradient descent on
//! L2-regularised cross-entropy.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synthetic;

/// Tolerance on the probability half of a feature vector.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("class index {index} out of range for {k} classes")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("not a one-hot vector")]
    NotOneHot,
    #[error("not a probability distribution (sum {0})")]
    NotDistribution(f64),
    #[error("non-finite model parameter")]
    NonFinite,
    #[error("no training examples")]
    Empty,
    #[error("model file: {0}")]
    Format(String),
}

pub fn one_hot(class_index: usize, k: usize) -> Result<Vec<f64>, EnsembleError> {
    if class_index >= k {
        return Err(EnsembleError::IndexOutOfRange {
            index: class_index,
            k,
        });
    }
    let mut v = vec![0.0; k];
    v[class_index] = 1.0;
    Ok(v)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_distribution(probs: &[f64]) -> Result<(), EnsembleError> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0)
        || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE
    {
        return Err(EnsembleError::NotDistribution(sum));
    }
    Ok(())
}

/// Stacked features: `K` one-hot entries followed by a `K`-class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn classes(&self) -> usize {
        self.values.len() / 2
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Validates a raw length-2K row (e.g. read from a features file).
    pub fn from_values(values: Vec<f64>) -> Result<Self, EnsembleError> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return Err(EnsembleError::Dimension {
                expected: values.len() + values.len() % 2,
                got: values.len(),
            });
        }
        let k = values.len() / 2;
        let (discrete, probs) = values.split_at(k);
        stack_features(discrete, probs)
    }
}

/// Concatenates a one-hot vector and a distribution of the same length.
pub fn stack_features(discrete: &[f64], probs: &[f64]) -> Result<FeatureVector, EnsembleError> {
    if discrete.len() != probs.len() {
        return Err(EnsembleError::Dimension {
            expected: discrete.len(),
            got: probs.len(),
        });
    }
    let ones = discrete.iter().filter(|v| **v == 1.0).count();
    let zeros = discrete.iter().filter(|v| **v == 0.0).count();
    if discrete.is_empty() || ones != 1 || ones + zeros != discrete.len() {
        return Err(EnsembleError::NotOneHot);
    }
    check_distribution(probs)?;
    let mut values = Vec::with_capacity(discrete.len() * 2);
    values.extend_from_slice(discrete);
    values.extend_from_slice(probs);
    Ok(FeatureVector { values })
}

/// Linear classifier over stacked features: `softmax(W f + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    k: usize,
    /// `k` rows of `2k` weights, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl StackingModel {
    pub fn new(k: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self, EnsembleError> {
        if weights.len() != k * 2 * k {
            return Err(EnsembleError::Dimension {
                expected: k * 2 * k,
                got: weights.len(),
            });
        }
        if bias.len() != k {
            return Err(EnsembleError::Dimension {
                expected: k,
                got: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|w| !w.is_finite()) {
            return Err(EnsembleError::NonFinite);
        }
        Ok(StackingModel { k, weights, bias })
    }

    pub fn zeros(k: usize) -> Self {
        StackingModel {
            k,
            weights: vec![0.0; 2 * k * k],
            bias: vec![0.0; k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.weights[class * 2 * self.k + feature]
    }

    pub fn weight_mut(&mut self, class: usize, feature: usize) -> &mut f64 {
        &mut self.weights[class * 2 * self.k + feature]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let width = 2 * self.k;
        self.weights
            .chunks_exact(width)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    /// Predicted class (lowest index on ties) and the class distribution.
    pub fn predict(&self, features: &FeatureVector) -> Result<(usize, Vec<f64>), EnsembleError> {
        if features.values.len() != 2 * self.k {
            return Err(EnsembleError::Dimension {
                expected: 2 * self.k,
                got: features.values.len(),
            });
        }
        let probs = softmax(&self.logits(&features.values));
        Ok((argmax(&probs), probs))
    }

    /// Text form: `K`, then `K` rows of `2K` weights, then the bias row.
    /// Floats use Rust's shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.k);
        let join = |xs: &[f64]| {
            xs.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for row in self.weights.chunks_exact(2 * self.k) {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&self.bias));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EnsembleError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let fmt = |m: String| EnsembleError::Format(m);
        let k: usize = lines
            .next()
            .ok_or_else(|| fmt("missing header".into()))?
            .trim()
            .parse()
            .map_err(|e| fmt(format!("header: {e}")))?;
        if k == 0 {
            return Err(fmt("K must be positive".into()));
        }
        let parse_row =
            |line: Option<&str>, what: &str, len: usize| -> Result<Vec<f64>, EnsembleError> {
                let line = line.ok_or_else(|| fmt(format!("missing {what}")))?;
                let row = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| fmt(format!("{what}: {e}"))))
                    .collect::<Result<Vec<_>, _>>()?;
                if row.len() != len {
                    return Err(fmt(format!(
                        "{what}: expected {len} values, got {}",
                        row.len()
                    )));
                }
                Ok(row)
            };
        let mut weights = Vec::with_capacity(2 * k * k);
        for r in 0..k {
            weights.extend(parse_row(lines.next(), &format!("weight row {r}"), 2 * k)?);
        }
        let bias = parse_row(lines.next(), "bias", k)?;
        if lines.next().is_some() {
            return Err(fmt("trailing data".into()));
        }
        StackingModel::new(k, weights, bias)
    }
}

/// One feature vector per line, whitespace-separated. Blank and `#` lines
/// are skipped.
pub fn parse_feature_rows(text: &str) -> Result<Vec<FeatureVector>, EnsembleError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EnsembleError::Format(format!("line {}: {e}", i + 1)))?;
        rows.push(
            FeatureVector::from_values(values)
                .map_err(|e| EnsembleError::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

/// One class index per line.
pub fn parse_label_rows(text: &str) -> Result<Vec<usize>, EnsembleError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| EnsembleError::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            l2: 1e-3,
            epochs: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStacker {
    pub model: StackingModel,
    /// Fewer than two distinct labels in the training data.
    pub degenerate: bool,
    /// Objective value before each epoch's update, plus the final value.
    pub losses: Vec<f64>,
}

/// Gradient of the training objective, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_batch(features: &[FeatureVector], labels: &[usize]) -> Result<usize, EnsembleError> {
    let first = features.first().ok_or(EnsembleError::Empty)?;
    if features.len() != labels.len() {
        return Err(EnsembleError::Dimension {
            expected: features.len(),
            got: labels.len(),
        });
    }
    let k = first.classes();
    for f in features {
        if f.classes() != k {
            return Err(EnsembleError::Dimension {
                expected: 2 * k,
                got: f.values.len(),
            });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(EnsembleError::IndexOutOfRange { index: bad, k });
    }
    Ok(k)
}

/// Mean cross-entropy plus `l2 / 2 * ||W||^2` (bias unregularised), and its
/// analytic gradient.
pub fn loss_and_gradient(
    model: &StackingModel,
    features: &[FeatureVector],
    labels: &[usize],
    l2: f64,
) -> Result<(f64, Gradient), EnsembleError> {
    let k = check_batch(features, labels)?;
    if k != model.k {
        return Err(EnsembleError::Dimension {
            expected: 2 * model.k,
            got: 2 * k,
        });
    }
    let n = features.len() as f64;
    let width = 2 * k;
    let mut grad = Gradient {
        weights: vec![0.0; k * width],
        bias: vec![0.0; k],
    };
    let mut loss = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let probs = softmax(&model.logits(&f.values));
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for (c, p) in probs.iter().enumerate() {
            let delta = (p - if c == y { 1.0 } else { 0.0 }) / n;
            grad.bias[c] += delta;
            let row = &mut grad.weights[c * width..(c + 1) * width];
            for (g, x) in row.iter_mut().zip(&f.values) {
                *g += delta * x;
            }
        }
    }
    loss /= n;
    let norm: f64 = model.weights.iter().map(|w| w * w).sum();
    loss += 0.5 * l2 * norm;
    for (g, w) in grad.weights.iter_mut().zip(&model.weights) {
        *g += l2 * w;
    }
    Ok((loss, grad))
}

pub fn train_stacker(
    features: &[FeatureVector],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainedStacker, EnsembleError> {
    let k = check_batch(features, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = (0..2 * k * k)
        .map(|_| rng.random_range(-0.01..0.01))
        .collect();
    let mut model = StackingModel::new(k, weights, vec![0.0; k])?;

    let mut seen = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    let degenerate = seen.len() < 2;
    if degenerate {
        tracing::warn!(
            classes = k,
            "training data has a single class; model is degenerate"
        );
    }

    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grad) = loss_and_gradient(&model, features, labels, config.l2)?;
        losses.push(loss);
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= config.learning_rate * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&grad.bias) {
            *b -= config.learning_rate * g;
        }
    }
    losses.push(loss_and_gradient(&model, features, labels, config.l2)?.0);
    if model
        .weights
        .iter()
        .chain(&model.bias)
        .any(|w| !w.is_finite())
    {
        return Err(EnsembleError::NonFinite);
    }
    Ok(TrainedStacker {
        model,
        degenerate,
        losses,
    })
}
