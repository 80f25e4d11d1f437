//! SGD and Adam with time-based learning-rate decay, and the supervised
//! training loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_eval_pipeline, apply_train_pipeline, image_rng, images_to_batch, AugmentConfig, Image};
use crate::dataset::{LabeledSet, Origin};
use crate::error::{Error, Result};
use crate::metrics::{mean_columnwise_auc, EpochRecord, MetricsReport, PredictionMatrix};
use crate::nn::{Mode, Model};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            optimizer: OptimizerKind::Adam,
            lr0: 1e-3,
            lr_decay: 1e-3,
            epochs: 30,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 {} must be > 0", self.lr0));
        }
        if !(self.lr_decay >= 0.0) {
            return fail(format!("lr_decay {} must be >= 0", self.lr_decay));
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} {b} must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps {} must be > 0", self.eps));
        }
        Ok(())
    }
}

/// `lr0 / (1 + lr_decay * epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / (1.0 + cfg.lr_decay * epoch as f64)
}

/// Per-parameter moment buffers. SGD keeps its velocity in `first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn for_params(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    fn check(&self, params: &[Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(format!(
                "{} params, {} grads, {} state buffers",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape(format!(
                    "param {i}: {} values, {} grads, {} state",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
        for ((theta, g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g;
            *theta -= lr * *v;
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((theta, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One optimizer step dispatched on `cfg.optimizer`.
pub fn optimizer_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    match cfg.optimizer {
        OptimizerKind::Adam => adam_step(params, grads, state, lr, cfg),
        OptimizerKind::Sgd => sgd_step(params, grads, state, lr, cfg.momentum),
    }
}

/// How training images are preprocessed.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub augment: AugmentConfig,
    /// Run the stochastic train pipeline; otherwise the eval pipeline is used
    /// for training images too.
    pub train_augmentation: bool,
}

impl Preprocessing {
    pub fn augmented(augment: AugmentConfig) -> Self {
        Self {
            augment,
            train_augmentation: true,
        }
    }

    pub fn plain(augment: AugmentConfig) -> Self {
        Self {
            augment,
            train_augmentation: false,
        }
    }

    /// Default normalization at `resolution`.
    pub fn plain_at(resolution: usize) -> Self {
        Self::plain(AugmentConfig::default().with_target(resolution))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch (last epoch without validation).
    pub model: Model,
    pub report: MetricsReport,
    /// 0-based.
    pub best_epoch: usize,
    pub optimizer_state: OptimizerState,
    /// Dropout and stochastic-depth decisions drawn over the whole run.
    pub noise_draws: usize,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_474d;
const NOISE_TAG: u64 = 0x4e4f_4953;
const EVAL_CHUNK: usize = 64;

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Eval-pipeline versions of `images`.
pub fn preprocess_eval(images: &[Arc<Image>], augment: &AugmentConfig) -> Result<Vec<Image>> {
    images.iter().map(|im| apply_eval_pipeline(im, augment)).collect()
}

/// Eval-mode class probabilities for preprocessed images.
pub fn predict_preprocessed(model: &Model, images: &[Image]) -> Result<PredictionMatrix> {
    let mut data = Vec::with_capacity(images.len() * model.num_classes());
    for chunk in images.chunks(EVAL_CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let probs = model.predict_proba(&images_to_batch(&refs)?)?;
        data.extend_from_slice(probs.data());
    }
    if data.is_empty() {
        return Ok(PredictionMatrix::empty(model.num_classes()));
    }
    PredictionMatrix::new(model.num_classes(), data)
}

/// Eval-mode probabilities for raw images.
pub fn predict(model: &Model, images: &[Arc<Image>], augment: &AugmentConfig) -> Result<PredictionMatrix> {
    let aug = augment.clone().with_target(model.input_resolution());
    predict_preprocessed(model, &preprocess_eval(images, &aug)?)
}

/// Mini-batch training with per-epoch validation and best-epoch selection.
///
/// Every source of randomness is derived from `cfg.seed`: the epoch shuffle,
/// one augmentation stream per (epoch, example) and one noise stream per
/// (epoch, batch). The run is therefore bit-reproducible.
pub fn train_supervised(
    mut model: Model,
    train: &LabeledSet,
    val: Option<&LabeledSet>,
    cfg: &TrainConfig,
    prep: &Preprocessing,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prep.augment.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if prep.augment.target_size != model.input_resolution() {
        return Err(Error::InvalidConfig(format!(
            "augment target {} differs from model input resolution {}",
            prep.augment.target_size,
            model.input_resolution()
        )));
    }
    if train.num_classes() != model.num_classes() {
        return Err(Error::ClassCountMismatch(train.num_classes(), model.num_classes()));
    }

    let cached_train = if prep.train_augmentation {
        None
    } else {
        Some(preprocess_eval(train.images(), &prep.augment)?)
    };
    let cached_val = val
        .map(|v| preprocess_eval(v.images(), &prep.augment))
        .transpose()?;

    let classes = model.num_classes();
    let mut state = OptimizerState::for_params(model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut noise_draws = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SHUFFLE_TAG, epoch as u64)));
        let aug_seed = mix_seed(cfg.seed, AUGMENT_TAG, epoch as u64);
        let noise_seed = mix_seed(cfg.seed, NOISE_TAG, epoch as u64);
        let mut loss_sum = 0.0;

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = match &cached_train {
                Some(cache) => batch.iter().map(|&i| cache[i].clone()).collect(),
                None => batch
                    .iter()
                    .map(|&i| {
                        let mut rng = image_rng(aug_seed, i as u64);
                        apply_train_pipeline(&train.images()[i], &prep.augment, &mut rng)
                    })
                    .collect::<Result<_>>()?,
            };
            let refs: Vec<&Image> = images.iter().collect();
            let input = images_to_batch(&refs)?;
            let targets = Tensor::new(
                &[batch.len(), classes],
                batch.iter().flat_map(|&i| train.labels().row(i).iter().copied()).collect(),
            )?;
            let pseudo = batch.iter().filter(|&&i| train.origins()[i] == Origin::Pseudo).count();
            log::trace!("epoch {epoch} batch {b}: {pseudo}/{} pseudo-labeled", batch.len());

            let mut tape = Tape::new();
            let x = tape.constant(input);
            let mut noise_rng = image_rng(noise_seed, b as u64);
            let pass = model.forward_on_tape(&mut tape, x, Mode::Train, &mut noise_rng, true)?;
            noise_draws += pass.noise_draws;
            let probs = tape.softmax(pass.logits)?;
            let loss = tape.cross_entropy(probs, &targets)?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = pass
                .params
                .iter()
                .map(|&p| tape.grad(p).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, batch {b}")));
            }
            optimizer_step(model.params_mut(), &grads, &mut state, lr, cfg)?;
            loss_sum += loss_value * batch.len() as f64;
        }

        let train_loss = loss_sum / train.len() as f64;
        let val_mean_auc = match (&cached_val, val) {
            (Some(images), Some(v)) => {
                let preds = predict_preprocessed(&model, images)?;
                Some(mean_columnwise_auc(&preds, v.labels())?.mean)
            }
            _ => None,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train loss {train_loss:.5} val mean AUC {}",
            val_mean_auc.map_or("-".into(), |a| format!("{a:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mean_auc,
        });
        if let Some(auc) = val_mean_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, model.params().to_vec()));
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model = Model::from_parameters(model.spec(), params)?;
            epoch
        }
        None => cfg.epochs - 1,
    };
    let mut report = match (&cached_val, val) {
        (Some(images), Some(v)) => MetricsReport::evaluate(&predict_preprocessed(&model, images)?, v.labels())?,
        _ => MetricsReport::default(),
    };
    report.loss_history = history;
    Ok(TrainOutcome {
        model,
        report,
        best_epoch,
        optimizer_state: state,
        noise_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Vec<Tensor> {
        vec![Tensor::from_vec(vec![v])]
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(30, &cfg) - 1e-3 / 1.03).abs() < 1e-18);
        let flat = TrainConfig { lr_decay: 0.0, ..cfg.clone() };
        assert_eq!(lr_at(100, &flat), flat.lr0);
        assert!((0..50).all(|e| lr_at(e + 1, &cfg) <= lr_at(e, &cfg)));
    }

    #[test]
    fn sgd_examples() {
        let mut p = single(1.0);
        let mut s = OptimizerState::for_params(&p);
        sgd_step(&mut p, &[vec![2.0]], &mut s, 0.1, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);

        let mut p = single(0.5);
        let mut s = OptimizerState::for_params(&p);
        sgd_step(&mut p, &[vec![0.0]], &mut s, 0.1, 0.9).unwrap();
        assert_eq!(p[0].data()[0], 0.5);

        let mut p = single(0.0);
        let mut s = OptimizerState::for_params(&p);
        sgd_step(&mut p, &[vec![1.0]], &mut s, 1.0, 0.9).unwrap();
        assert!((p[0].data()[0] + 1.0).abs() < 1e-15);
        sgd_step(&mut p, &[vec![1.0]], &mut s, 1.0, 0.9).unwrap();
        assert!((p[0].data()[0] + 2.9).abs() < 1e-15);

        assert!(sgd_step(&mut p, &[vec![1.0, 2.0]], &mut s, 1.0, 0.9).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig::default();
        for g in [3.0, -0.02] {
            let mut p = single(1.0);
            let mut s = OptimizerState::for_params(&p);
            adam_step(&mut p, &[vec![g]], &mut s, 0.01, &cfg).unwrap();
            let delta = 1.0 - p[0].data()[0];
            assert!((delta.abs() - 0.01).abs() < 1e-6 && delta.signum() == g.signum());
        }
        let mut p = single(1.0);
        let mut s = OptimizerState::for_params(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, 0.01, &cfg).unwrap();
        assert_eq!(p[0].data()[0], 1.0);

        // f = theta^2 from theta = 1.
        let mut p = single(1.0);
        let mut s = OptimizerState::for_params(&p);
        let mut hit = None;
        for step in 1..=60 {
            let g = 2.0 * p[0].data()[0];
            adam_step(&mut p, &[vec![g]], &mut s, 0.1, &cfg).unwrap();
            if p[0].data()[0].abs() < 0.1 {
                hit = Some(step);
                break;
            }
        }
        assert!(hit.is_some());
    }

    #[test]
    fn steps_are_chunking_invariant() {
        let cfg = TrainConfig::default();
        let whole = vec![1.0, -2.0, 0.5, 3.0, -1.5];
        let grads = vec![0.3, -0.1, 2.0, -0.7, 0.05];
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let cfg = TrainConfig { optimizer: kind, ..cfg.clone() };
            let mut a = vec![Tensor::from_vec(whole.clone())];
            let mut sa = OptimizerState::for_params(&a);
            let mut b = vec![Tensor::from_vec(whole[..2].to_vec()), Tensor::from_vec(whole[2..].to_vec())];
            let mut sb = OptimizerState::for_params(&b);
            for _ in 0..3 {
                optimizer_step(&mut a, std::slice::from_ref(&grads), &mut sa, 0.05, &cfg).unwrap();
                optimizer_step(&mut b, &[grads[..2].to_vec(), grads[2..].to_vec()], &mut sb, 0.05, &cfg).unwrap();
            }
            let joined: Vec<f64> = b.iter().flat_map(|t| t.data().to_vec()).collect();
            assert_eq!(a[0].data(), joined.as_slice());
        }
    }

    #[test]
    fn quadratic_descent_is_monotone_after_burn_in() {
        let cfg = TrainConfig::default();
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let cfg = TrainConfig { optimizer: kind, ..cfg.clone() };
            let mut p = vec![Tensor::from_vec(vec![1.0, -0.5])];
            let mut s = OptimizerState::for_params(&p);
            let loss = |p: &[Tensor]| p[0].data().iter().map(|v| v * v).sum::<f64>();
            let mut prev = loss(&p);
            for step in 0..200 {
                let g: Vec<f64> = p[0].data().iter().map(|v| 2.0 * v).collect();
                optimizer_step(&mut p, &[g], &mut s, 1e-3, &cfg).unwrap();
                let now = loss(&p);
                if step >= 5 {
                    assert!(now <= prev, "{kind:?} step {step}: {now} > {prev}");
                }
                prev = now;
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(mix_seed(1, 2, 3), mix_seed(1, 2, 4));
        assert_ne!(mix_seed(1, 2, 3), mix_seed(1, 3, 3));
        assert_eq!(mix_seed(7, 7, 7), mix_seed(7, 7, 7));
    }
}
