//! Cross-entropy, column-wise ROC AUC and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::tape::row_cross_entropy;
use crate::tensor::Tensor;

/// Label column order used by CSV files and reports.
pub const CLASS_NAMES: [&str; 4] = ["healthy", "multiple_diseases", "rust", "scab"];

const ROW_SUM_TOL: f64 = 1e-9;

/// Row-major `rows x cols` matrix of probabilities; every row sums to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMatrix {
    cols: usize,
    data: Vec<f64>,
}

/// Target distributions `p`.
pub type LabelMatrix = ClassMatrix;
/// Predicted distributions `y`.
pub type PredictionMatrix = ClassMatrix;

impl ClassMatrix {
    pub fn new(cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(Error::shape(format!(
                "{} values do not form rows of {cols}",
                data.len()
            )));
        }
        for row in data.chunks(cols) {
            if let Some(&v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidProbability {
                    what: "matrix entry",
                    value: v,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidProbability {
                    what: "row sum",
                    value: sum,
                });
            }
        }
        Ok(Self { cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(CLASS_NAMES.len(), Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(cols, rows.concat())
    }

    /// Zero rows with `cols` columns.
    pub fn empty(cols: usize) -> Self {
        Self {
            cols,
            data: Vec::new(),
        }
    }

    /// From an `[N, C]` probability tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [_, c] => Self::new(c, t.data().to_vec()),
            _ => Err(Error::shape(format!("expected NxC tensor, got {:?}", t.shape()))),
        }
    }

    /// One-hot rows from class indices.
    pub fn one_hot(classes: &[usize], cols: usize) -> Result<Self> {
        let mut data = vec![0.0; classes.len() * cols];
        for (i, &c) in classes.iter().enumerate() {
            if c >= cols {
                return Err(Error::shape(format!("class {c} out of range for {cols} columns")));
            }
            data[i * cols + c] = 1.0;
        }
        Ok(Self { cols, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Row subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self {
            cols: self.cols,
            data,
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ColumnOrderMismatch);
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            cols: self.cols,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows(), self.cols], self.data.clone()).expect("consistent matrix shape")
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `-sum_i p_i ln(y_i)` with `y_i` clamped to `[1e-12, 1]`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape(format!("target row {} vs prediction row {}", p.len(), y.len())));
    }
    Ok(row_cross_entropy(p, y))
}

/// Mean of row cross-entropies.
pub fn batch_cross_entropy(labels: &LabelMatrix, preds: &PredictionMatrix) -> Result<f64> {
    check_same_shape(labels, preds)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = labels
        .iter_rows()
        .zip(preds.iter_rows())
        .map(|(p, y)| row_cross_entropy(p, y))
        .sum();
    Ok(total / labels.rows() as f64)
}

fn check_same_shape(a: &ClassMatrix, b: &ClassMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Indices sorted by ascending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn class_counts(positives: &[bool]) -> (usize, usize) {
    let pos = positives.iter().filter(|p| **p).count();
    (pos, positives.len() - pos)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc_column(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), positives.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("AUC scores".into()));
    }
    let (n_pos, n_neg) = class_counts(positives);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateColumn { column: None });
    }
    let mut negatives_below = 0usize;
    let mut twice_wins = 0u128;
    for group in tie_groups(scores) {
        let pos = group.iter().filter(|&&i| positives[i]).count();
        let neg = group.len() - pos;
        twice_wins += (pos * (2 * negatives_below + neg)) as u128;
        negatives_below += neg;
    }
    Ok(twice_wins as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses
    /// `+inf` (nothing called positive).
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve over distinct thresholds in descending order, from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != positives.len() {
        return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), positives.len())));
    }
    let (n_pos, n_neg) = class_counts(positives);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateColumn { column: None });
    }
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for group in tie_groups(scores).iter().rev() {
        for &i in group {
            if positives[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            threshold: scores[group[0]],
            tpr: tp as f64 / n_pos as f64,
            fpr: fp as f64 / n_neg as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC curve.
pub fn trapezoid_auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Per-column AUCs (`None` for degenerate columns) and their mean over the
/// rest. Labels are binarized at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnAuc {
    pub per_column: Vec<Option<f64>>,
    pub mean: f64,
}

impl ColumnAuc {
    pub fn degenerate_columns(&self) -> Vec<usize> {
        self.per_column
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.is_none().then_some(i))
            .collect()
    }
}

pub fn binarize_column(labels: &LabelMatrix, j: usize) -> Vec<bool> {
    labels.iter_rows().map(|r| r[j] >= 0.5).collect()
}

pub fn mean_columnwise_auc(preds: &PredictionMatrix, labels: &LabelMatrix) -> Result<ColumnAuc> {
    check_same_shape(preds, labels)?;
    let mut per_column = Vec::with_capacity(labels.cols());
    for j in 0..labels.cols() {
        match roc_auc_column(&preds.column(j), &binarize_column(labels, j)) {
            Ok(a) => per_column.push(Some(a)),
            Err(Error::DegenerateColumn { .. }) => {
                log::warn!("AUC column {j} is degenerate and excluded from the mean");
                per_column.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let valid: Vec<f64> = per_column.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::AllColumnsDegenerate);
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(ColumnAuc { per_column, mean })
}

/// `m[i][j]` counts rows whose label argmax is `i` and prediction argmax is `j`.
pub fn confusion_matrix(preds: &PredictionMatrix, labels: &LabelMatrix) -> Result<Vec<Vec<usize>>> {
    check_same_shape(preds, labels)?;
    let c = labels.cols();
    let mut m = vec![vec![0; c]; c];
    for (p, l) in preds.iter_rows().zip(labels.iter_rows()) {
        m[argmax(l)][argmax(p)] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation set was supplied.
    pub val_mean_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_column_auc: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub confusion: Vec<Vec<usize>>,
    pub loss_history: Vec<EpochRecord>,
    pub tpr_fpr_curves: Vec<Vec<RocPoint>>,
}

impl MetricsReport {
    /// Evaluation fragment for one prediction/label pair; `loss_history` is
    /// left empty.
    pub fn evaluate(preds: &PredictionMatrix, labels: &LabelMatrix) -> Result<Self> {
        let auc = mean_columnwise_auc(preds, labels)?;
        let confusion = confusion_matrix(preds, labels)?;
        let tpr_fpr_curves = (0..labels.cols())
            .map(|j| roc_curve(&preds.column(j), &binarize_column(labels, j)).unwrap_or_default())
            .collect();
        Ok(Self {
            per_column_auc: auc.per_column,
            mean_auc: auc.mean,
            confusion,
            loss_history: Vec::new(),
            tpr_fpr_curves,
        })
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let trace: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            trace as f64 / total as f64
        }
    }
}
