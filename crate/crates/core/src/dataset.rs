//! In-memory labeled, unlabeled and pseudo-labeled image sets.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::metrics::LabelMatrix;

/// Where a training example's label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    ids: Vec<String>,
    images: Vec<Arc<Image>>,
    labels: LabelMatrix,
    origins: Vec<Origin>,
}

impl LabeledSet {
    pub fn new(ids: Vec<String>, images: Vec<Arc<Image>>, labels: LabelMatrix) -> Result<Self> {
        let origins = vec![Origin::Real; ids.len()];
        Self::with_origins(ids, images, labels, origins)
    }

    pub fn with_origins(
        ids: Vec<String>,
        images: Vec<Arc<Image>>,
        labels: LabelMatrix,
        origins: Vec<Origin>,
    ) -> Result<Self> {
        let n = ids.len();
        if images.len() != n || labels.rows() != n || origins.len() != n {
            return Err(Error::shape(format!(
                "{n} ids, {} images, {} label rows, {} origins",
                images.len(),
                labels.rows(),
                origins.len()
            )));
        }
        Ok(Self {
            ids,
            images,
            labels,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Arc<Image>] {
        &self.images
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn origins(&self) -> &[Origin] {
        &self.origins
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn count_origin(&self, origin: Origin) -> usize {
        self.origins.iter().filter(|o| **o == origin).count()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| Arc::clone(&self.images[i])).collect(),
            labels: self.labels.select(indices),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
        }
    }

    /// Drops the labels.
    pub fn to_unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            ids: self.ids.clone(),
            images: self.images.clone(),
        }
    }

    /// Seeded split that keeps each argmax class's share: per class,
    /// `round(n_c * fraction)` examples go to the first set. Both outputs keep
    /// the original relative order.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (first, second) = stratified_indices(&self.labels, fraction, seed)?;
        Ok((self.select(&first), self.select(&second)))
    }
}

/// Index partition behind [`LabeledSet::stratified_split`].
pub fn stratified_indices(labels: &LabelMatrix, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidProbability {
            what: "split fraction",
            value: fraction,
        });
    }
    let mut by_class = vec![Vec::new(); labels.cols()];
    for i in 0..labels.rows() {
        by_class[labels.argmax(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let k = (members.len() as f64 * fraction).round() as usize;
        first.extend_from_slice(&members[..k]);
        second.extend_from_slice(&members[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlabeledSet {
    ids: Vec<String>,
    images: Vec<Arc<Image>>,
}

impl UnlabeledSet {
    pub fn new(ids: Vec<String>, images: Vec<Arc<Image>>) -> Result<Self> {
        if ids.len() != images.len() {
            return Err(Error::shape(format!("{} ids vs {} images", ids.len(), images.len())));
        }
        Ok(Self { ids, images })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Arc<Image>] {
        &self.images
    }
}

/// Teacher predictions on unlabeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabeledSet {
    ids: Vec<String>,
    images: Vec<Arc<Image>>,
    soft_labels: LabelMatrix,
    confidences: Vec<f64>,
}

impl PseudoLabeledSet {
    /// Confidences are the row maxima of `soft_labels`.
    pub fn new(ids: Vec<String>, images: Vec<Arc<Image>>, soft_labels: LabelMatrix) -> Result<Self> {
        if ids.len() != images.len() || soft_labels.rows() != ids.len() {
            return Err(Error::shape(format!(
                "{} ids, {} images, {} label rows",
                ids.len(),
                images.len(),
                soft_labels.rows()
            )));
        }
        let confidences = soft_labels
            .iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Self {
            ids,
            images,
            soft_labels,
            confidences,
        })
    }

    /// Explicit per-row confidences, e.g. teacher maxima behind hard labels.
    pub fn with_confidences(
        ids: Vec<String>,
        images: Vec<Arc<Image>>,
        soft_labels: LabelMatrix,
        confidences: Vec<f64>,
    ) -> Result<Self> {
        let mut ps = Self::new(ids, images, soft_labels)?;
        if confidences.len() != ps.len() {
            return Err(Error::shape(format!("{} confidences for {} rows", confidences.len(), ps.len())));
        }
        ps.confidences = confidences;
        Ok(ps)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Arc<Image>] {
        &self.images
    }

    pub fn soft_labels(&self) -> &LabelMatrix {
        &self.soft_labels
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| Arc::clone(&self.images[i])).collect(),
            soft_labels: self.soft_labels.select(indices),
            confidences: indices.iter().map(|&i| self.confidences[i]).collect(),
        }
    }
}
