//! Probability-averaging ensembles.

use std::sync::Arc;

use crate::augment::{AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::metrics::PredictionMatrix;
use crate::nn::Model;
use crate::optim::predict;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Model>,
    weights: Option<Vec<f64>>,
}

impl Ensemble {
    /// Uniformly weighted. Members may differ in architecture and input
    /// resolution but must agree on the class count.
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        let classes = first.num_classes();
        if let Some(m) = members.iter().find(|m| m.num_classes() != classes) {
            return Err(Error::ClassCountMismatch(classes, m.num_classes()));
        }
        Ok(Self {
            members,
            weights: None,
        })
    }

    /// Nonnegative weights summing to 1, one per member.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.members.len() {
            return Err(Error::shape(format!(
                "{} weights for {} members",
                weights.len(),
                self.members.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidProbability {
                what: "ensemble weight",
                value: w,
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidProbability {
                what: "ensemble weight sum",
                value: total,
            });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Recursive halving keeps the rounding error at O(log n) and nearly
/// independent of element order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Weighted mean of member probabilities. Each member preprocesses the raw
/// images with the eval pipeline at its own input resolution.
pub fn ensemble_predict(e: &Ensemble, images: &[Arc<Image>], augment: &AugmentConfig) -> Result<PredictionMatrix> {
    let member_preds: Vec<PredictionMatrix> = e
        .members
        .iter()
        .map(|m| predict(m, images, augment))
        .collect::<Result<_>>()?;
    combine_predictions(&member_preds, e.weights.as_deref())
}

/// Weighted (uniform when `weights` is `None`) mean of prediction matrices.
pub fn combine_predictions(preds: &[PredictionMatrix], weights: Option<&[f64]>) -> Result<PredictionMatrix> {
    let first = preds.first().ok_or(Error::EmptyEnsemble)?;
    for p in preds {
        if p.cols() != first.cols() {
            return Err(Error::ClassCountMismatch(first.cols(), p.cols()));
        }
        if p.rows() != first.rows() {
            return Err(Error::shape(format!("{} vs {} prediction rows", first.rows(), p.rows())));
        }
    }
    if first.is_empty() {
        return Ok(PredictionMatrix::empty(first.cols()));
    }
    let m = preds.len() as f64;
    let mut terms = vec![0.0; preds.len()];
    let data = (0..first.data().len())
        .map(|i| {
            for (k, p) in preds.iter().enumerate() {
                terms[k] = match weights {
                    Some(w) => w[k] * p.data()[i],
                    None => p.data()[i],
                };
            }
            match weights {
                Some(_) => pairwise_sum(&terms),
                None => pairwise_sum(&terms) / m,
            }
        })
        .collect();
    PredictionMatrix::new(first.cols(), data)
}
