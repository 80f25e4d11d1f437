use noisyleaf::augment::AugmentConfig;
use noisyleaf::dataset::LabeledSet;
use noisyleaf::metrics::ClassMatrix;
use noisyleaf::nn::{build_model, init_rng, ModelSpec};
use noisyleaf::optim::{predict, train_supervised, OptimizerKind, Preprocessing, TrainConfig};
use noisyleaf::synthetic::{generate, SyntheticConfig};
use noisyleaf::Error;

fn synthetic(count: usize, seed: u64) -> LabeledSet {
    generate(&SyntheticConfig {
        count,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn eight_examples_overfit_within_200_epochs() {
    let train = synthetic(8, 1);
    let model = build_model(&ModelSpec::desk_scale(), &mut init_rng(1)).unwrap();
    let out = train_supervised(model, &train, None, &config(200, 1), &Preprocessing::plain_at(32)).unwrap();
    let last = out.report.loss_history.last().unwrap().train_loss;
    assert!(last < 0.05, "final train loss {last}");
    // Without validation the returned weights are the final ones.
    assert_eq!(out.best_epoch, 199);
}

#[test]
fn same_seed_gives_identical_history_and_weights() {
    let all = synthetic(24, 2);
    let (train, val) = all.stratified_split(0.75, 2).unwrap();
    let run = |seed| {
        let model = build_model(&ModelSpec::desk_scale().with_noise(0.2, 0.8), &mut init_rng(seed)).unwrap();
        let prep = Preprocessing::augmented(AugmentConfig::default().with_target(32));
        train_supervised(model, &train, Some(&val), &config(3, seed), &prep).unwrap()
    };
    let (a, b) = (run(5), run(5));
    assert_eq!(a.report.loss_history, b.report.loss_history);
    assert_eq!(a.model, b.model);
    assert_eq!(a.noise_draws, b.noise_draws);
    assert!(a.noise_draws > 0);
    assert_ne!(run(6).report.loss_history, a.report.loss_history);
}

#[test]
fn best_validation_epoch_weights_are_returned() {
    let all = synthetic(40, 3);
    let (train, val) = all.stratified_split(0.7, 3).unwrap();
    let model = build_model(&ModelSpec::desk_scale(), &mut init_rng(3)).unwrap();
    let prep = Preprocessing::plain_at(32);
    let out = train_supervised(model, &train, Some(&val), &config(6, 3), &prep).unwrap();
    let aucs: Vec<f64> = out.report.loss_history.iter().map(|r| r.val_mean_auc.unwrap()).collect();
    let best = aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // The earliest epoch reaching the maximum wins.
    assert_eq!(out.best_epoch, aucs.iter().position(|&a| a == best).unwrap());
    assert_eq!(out.report.mean_auc, best);
    let preds = predict(&out.model, val.images(), &prep.augment).unwrap();
    let again = noisyleaf::metrics::mean_columnwise_auc(&preds, val.labels()).unwrap().mean;
    assert_eq!(again, best);
}

#[test]
fn sgd_and_adam_both_reduce_the_loss() {
    let train = synthetic(16, 4);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let model = build_model(&ModelSpec::desk_scale(), &mut init_rng(4)).unwrap();
        let cfg = TrainConfig {
            optimizer,
            ..config(8, 4)
        };
        let out = train_supervised(model, &train, None, &cfg, &Preprocessing::plain_at(32)).unwrap();
        let h = &out.report.loss_history;
        assert!(h.last().unwrap().train_loss < h[0].train_loss, "{optimizer:?}: {h:?}");
    }
}

#[test]
fn exploding_learning_rate_reports_non_finite() {
    let train = synthetic(8, 5);
    let model = build_model(&ModelSpec::desk_scale(), &mut init_rng(5)).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr0: f64::MAX,
        ..config(3, 5)
    };
    let result = train_supervised(model, &train, None, &cfg, &Preprocessing::plain_at(32));
    assert!(matches!(result, Err(Error::NonFinite(_))), "{result:?}");
}

#[test]
fn mismatched_inputs_are_rejected() {
    let train = synthetic(8, 6);
    let model = build_model(&ModelSpec::desk_scale(), &mut init_rng(6)).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..config(1, 6)
    };
    assert!(train_supervised(model.clone(), &train, None, &bad, &Preprocessing::plain_at(32)).is_err());

    let labels = ClassMatrix::one_hot(&[0, 1], 2).unwrap();
    let two_class = LabeledSet::new(
        train.ids()[..2].to_vec(),
        train.images()[..2].to_vec(),
        labels,
    )
    .unwrap();
    assert!(train_supervised(model, &two_class, None, &config(1, 6), &Preprocessing::plain_at(32)).is_err());
}
