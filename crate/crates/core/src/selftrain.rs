//! Noisy Student self-training: a clean teacher pseudo-labels unlabeled
//! images, and a freshly initialized, possibly larger, student is trained
//! with noise on the union. The student then becomes the next teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dataset::{LabeledSet, Origin, PseudoLabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::metrics::{argmax, LabelMatrix, MetricsReport};
use crate::nn::{build_model, Model, ModelSpec, DEFAULT_SURVIVAL_PROB};
use crate::optim::{mix_seed, predict, train_supervised, Preprocessing, TrainConfig};
use crate::scaling::{scale_model_spec, ScaledDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Soft,
    Hard,
}

/// Student-only regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub dropout_prob: f64,
    pub survival_prob: f64,
    pub augment: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            dropout_prob: 0.2,
            survival_prob: DEFAULT_SURVIVAL_PROB,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub iterations: usize,
    pub label_mode: LabelMode,
    pub confidence_threshold: f64,
    /// Growth applied to the previous model's spec at each iteration; when
    /// shorter than `iterations` the last entry repeats, and an empty list
    /// means no growth.
    pub student_growth: Vec<ScaledDims>,
    pub noise: NoiseConfig,
    /// Train-pipeline augmentation for the iteration-0 teacher.
    pub teacher_augment: bool,
    /// Supplied by the caller (the run config's `[train]` section).
    #[serde(skip)]
    pub train: TrainConfig,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            label_mode: LabelMode::Soft,
            confidence_threshold: 0.0,
            student_growth: Vec::new(),
            noise: NoiseConfig::default(),
            teacher_augment: true,
            train: TrainConfig::default(),
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return Err(Error::InvalidConfig(format!(
                "confidence_threshold {} must lie in [0, 1)",
                self.confidence_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.noise.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "noise dropout_prob {} must lie in [0, 1)",
                self.noise.dropout_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.noise.survival_prob) {
            return Err(Error::InvalidConfig(format!(
                "noise survival_prob {} must lie in [0, 1]",
                self.noise.survival_prob
            )));
        }
        for g in &self.student_growth {
            check_growth(g)?;
        }
        Ok(())
    }

    /// Growth for 1-based iteration `k`.
    pub fn growth_for(&self, k: usize) -> ScaledDims {
        self.student_growth
            .get(k - 1)
            .or(self.student_growth.last())
            .copied()
            .unwrap_or(ScaledDims::IDENTITY)
    }
}

fn check_growth(g: &ScaledDims) -> Result<()> {
    if [g.d, g.w, g.r].iter().any(|v| !(*v >= 1.0) || !v.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "student growth ({}, {}, {}) must be >= 1 in every dimension",
            g.d, g.w, g.r
        )));
    }
    Ok(())
}

/// Teacher predictions on `unlabeled` under the eval pipeline. Hard mode
/// replaces each row by the one-hot of its argmax (ties to the lowest index).
pub fn pseudo_label(
    teacher: &Model,
    unlabeled: &UnlabeledSet,
    mode: LabelMode,
    augment: &AugmentConfig,
) -> Result<PseudoLabeledSet> {
    if unlabeled.is_empty() {
        return Err(Error::EmptyUnlabeledSet);
    }
    let probs = predict(teacher, unlabeled.images(), augment)?;
    let (ids, images) = (unlabeled.ids().to_vec(), unlabeled.images().to_vec());
    match mode {
        LabelMode::Soft => PseudoLabeledSet::new(ids, images, probs),
        LabelMode::Hard => {
            // Confidence keeps the teacher's probability, not the one-hot 1.
            let confidences = probs.iter_rows().map(row_max).collect();
            let classes: Vec<usize> = probs.iter_rows().map(argmax).collect();
            let hard = LabelMatrix::one_hot(&classes, probs.cols())?;
            PseudoLabeledSet::with_confidences(ids, images, hard, confidences)
        }
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Keeps rows whose confidence is at least `threshold`, in order.
pub fn filter_pseudo(ps: &PseudoLabeledSet, threshold: f64) -> PseudoLabeledSet {
    let keep: Vec<usize> = (0..ps.len()).filter(|&i| ps.confidences()[i] >= threshold).collect();
    ps.select(&keep)
}

/// Labeled examples followed by pseudo-labeled ones, tagged by origin.
pub fn combine(labeled: &LabeledSet, pseudo: &PseudoLabeledSet) -> Result<LabeledSet> {
    if pseudo.is_empty() {
        return Ok(labeled.clone());
    }
    if labeled.num_classes() != pseudo.soft_labels().cols() {
        return Err(Error::ColumnOrderMismatch);
    }
    let mut ids = labeled.ids().to_vec();
    ids.extend_from_slice(pseudo.ids());
    let mut images = labeled.images().to_vec();
    images.extend_from_slice(pseudo.images());
    let labels = labeled.labels().concat(pseudo.soft_labels())?;
    let mut origins = labeled.origins().to_vec();
    origins.extend(std::iter::repeat_n(Origin::Pseudo, pseudo.len()));
    LabeledSet::with_origins(ids, images, labels, origins)
}

/// Student architecture: `teacher_spec` scaled by `growth` (every factor
/// must be at least 1). Weights are initialized separately.
pub fn grow_student(teacher_spec: &ModelSpec, growth: &ScaledDims) -> Result<ModelSpec> {
    check_growth(growth)?;
    let spec = scale_model_spec(teacher_spec, growth)?;
    if spec.parameter_count() < teacher_spec.parameter_count() {
        return Err(Error::InvalidSpec(format!(
            "grown student has {} parameters, fewer than the teacher's {}",
            spec.parameter_count(),
            teacher_spec.parameter_count()
        )));
    }
    Ok(spec)
}

/// One trained model of the loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationReport {
    /// 0 is the teacher trained on labeled data only.
    pub iteration: usize,
    pub spec: ModelSpec,
    pub num_parameters: usize,
    pub pseudo_labeled: usize,
    pub train_size: usize,
    pub best_epoch: usize,
    pub noise_draws: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub model: Model,
    pub iterations: Vec<IterationReport>,
    pub pseudo_label_passes: usize,
}

const INIT_TAG: u64 = 0x494e_4954;
const ITERATION_TAG: u64 = 0x4954_4552;

impl SelfTrainOutcome {
    pub fn val_auc_table(&self) -> Vec<(usize, f64)> {
        self.iterations.iter().map(|r| (r.iteration, r.metrics.mean_auc)).collect()
    }
}

/// Iteration 0 trains a noise-free teacher on `labeled`; each later
/// iteration pseudo-labels `unlabeled` with the current model in Eval mode,
/// filters, combines, grows the spec and trains a noised student from scratch.
pub fn noisy_student_loop(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    val: Option<&LabeledSet>,
    base_spec: &ModelSpec,
    augment: &AugmentConfig,
    cfg: &SelfTrainConfig,
) -> Result<SelfTrainOutcome> {
    cfg.validate()?;
    let teacher_spec = base_spec.clone().with_noise(0.0, 1.0);
    let run = |k: usize, spec: &ModelSpec, data: &LabeledSet, augmented: bool| -> Result<(Model, IterationReport)> {
        let mut init = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, INIT_TAG, k as u64));
        let model = build_model(spec, &mut init)?;
        let train_cfg = TrainConfig {
            seed: mix_seed(cfg.train.seed, ITERATION_TAG, k as u64),
            ..cfg.train.clone()
        };
        let aug = augment.clone().with_target(spec.input_resolution);
        let prep = if augmented {
            Preprocessing::augmented(aug)
        } else {
            Preprocessing::plain(aug)
        };
        let out = train_supervised(model, data, val, &train_cfg, &prep)?;
        let report = IterationReport {
            iteration: k,
            spec: spec.clone(),
            num_parameters: spec.parameter_count(),
            pseudo_labeled: data.count_origin(Origin::Pseudo),
            train_size: data.len(),
            best_epoch: out.best_epoch,
            noise_draws: out.noise_draws,
            metrics: out.report,
        };
        log::info!(
            "iteration {k}: {} params, {} examples ({} pseudo), mean AUC {:.5}",
            report.num_parameters,
            report.train_size,
            report.pseudo_labeled,
            report.metrics.mean_auc
        );
        Ok((out.model, report))
    };

    let (mut model, report) = run(0, &teacher_spec, labeled, cfg.teacher_augment)?;
    let mut reports = vec![report];
    let mut passes = 0;
    for k in 1..=cfg.iterations {
        let data = if unlabeled.is_empty() {
            log::warn!("iteration {k}: no unlabeled data, training on labeled data only");
            labeled.clone()
        } else {
            let ps = pseudo_label(&model, unlabeled, cfg.label_mode, augment)?;
            passes += 1;
            let kept = filter_pseudo(&ps, cfg.confidence_threshold);
            if kept.is_empty() {
                log::warn!("iteration {k}: every pseudo-label fell below the threshold");
            }
            combine(labeled, &kept)?
        };
        let spec = grow_student(model.spec(), &cfg.growth_for(k))?
            .with_noise(cfg.noise.dropout_prob, cfg.noise.survival_prob);
        let (student, report) = run(k, &spec, &data, cfg.noise.augment)?;
        model = student;
        reports.push(report);
    }
    Ok(SelfTrainOutcome {
        model,
        iterations: reports,
        pseudo_label_passes: passes,
    })
}
