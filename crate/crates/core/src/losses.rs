//! Cluster, separation and cross-entropy losses and their weighted sum.
//!
//! The prototype losses consume max-pooled scores (one per prototype); the
//! max over latent cells already happened in the prototype layer.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Weights of the prototype losses in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_clst: f64,
    pub lambda_sep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_clst: 0.8,
            lambda_sep: 0.08,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_clst: f64, lambda_sep: f64) -> Result<Self> {
        for (name, v) in [("lambda_clst", lambda_clst), ("lambda_sep", lambda_sep)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Configuration(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda_clst,
            lambda_sep,
        })
    }
}

/// Pooled scores for a batch, row-major `samples x prototypes`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities {
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    /// Owning class of each prototype.
    pub proto_class: Vec<usize>,
}

impl BatchSimilarities {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, proto_class: Vec<usize>) -> Result<Self> {
        check_dim(
            "batch similarity scores",
            labels.len() * proto_class.len(),
            scores.len(),
        )?;
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite pooled score {s}")));
        }
        Ok(BatchSimilarities {
            scores,
            labels,
            proto_class,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        let p = self.proto_class.len();
        &self.scores[i * p..(i + 1) * p]
    }
}

/// Index and value of the highest score among prototypes whose class
/// satisfies `keep`; ties go to the lowest index.
pub fn masked_argmax(
    scores: &[f64],
    proto_class: &[usize],
    keep: impl Fn(usize) -> bool,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (&s, &c)) in scores.iter().zip(proto_class).enumerate() {
        if keep(c) && best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best
}

/// Best same-class prototype for one sample.
pub fn cluster_term(scores: &[f64], proto_class: &[usize], label: usize) -> Result<(usize, f64)> {
    masked_argmax(scores, proto_class, |c| c == label)
        .ok_or_else(|| Error::Configuration(format!("class {label} has no prototypes")))
}

/// Best other-class prototype for one sample.
pub fn separation_term(
    scores: &[f64],
    proto_class: &[usize],
    label: usize,
) -> Result<(usize, f64)> {
    masked_argmax(scores, proto_class, |c| c != label).ok_or_else(|| {
        Error::Configuration("separation loss needs prototypes outside the sample's class".into())
    })
}

/// `-(1/N) sum_i max_{p in P_{y_i}} s_i(p)`.
pub fn cluster_loss(batch: &BatchSimilarities) -> Result<f64> {
    mean_over(batch, |i| {
        Ok(-cluster_term(batch.row(i), &batch.proto_class, batch.labels[i])?.1)
    })
}

/// `(1/N) sum_i max_{p not in P_{y_i}} s_i(p)`.
pub fn separation_loss(batch: &BatchSimilarities) -> Result<f64> {
    mean_over(batch, |i| {
        Ok(separation_term(batch.row(i), &batch.proto_class, batch.labels[i])?.1)
    })
}

fn mean_over(batch: &BatchSimilarities, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += f(i)?;
    }
    Ok(acc / n as f64)
}

/// Numerically stable `softmax(logits)`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Configuration(
            "cross entropy needs at least two classes".into(),
        ));
    }
    if label >= logits.len() {
        return Err(Error::DimensionMismatch {
            context: "cross entropy label",
            expected: logits.len(),
            got: label,
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Cross entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok((loss, g))
}

/// `ce + lambda_clst * clst + lambda_sep * sep`.
pub fn total_loss(ce: f64, clst: f64, sep: f64, w: &LossWeights) -> f64 {
    ce + w.lambda_clst * clst + w.lambda_sep * sep
}
