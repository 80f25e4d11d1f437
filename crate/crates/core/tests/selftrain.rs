use std::sync::Arc;

use noisyleaf::augment::{AugmentConfig, Image};
use noisyleaf::dataset::{LabeledSet, Origin, PseudoLabeledSet, UnlabeledSet};
use noisyleaf::metrics::ClassMatrix;
use noisyleaf::nn::{build_model, init_rng, Model, ModelSpec, StageConfig};
use noisyleaf::optim::{preprocess_eval, predict_preprocessed, TrainConfig};
use noisyleaf::scaling::ScaledDims;
use noisyleaf::selftrain::{
    combine, filter_pseudo, grow_student, noisy_student_loop, pseudo_label, LabelMode, SelfTrainConfig,
};
use noisyleaf::synthetic::{generate, SyntheticConfig};
use noisyleaf::tensor::Tensor;
use noisyleaf::Error;

const RES: usize = 16;

fn tiny_spec() -> ModelSpec {
    ModelSpec::from_stages(
        4,
        &[
            StageConfig { repeats: 1, out_channels: 4, expansion_ratio: 2.0, stride: 1 },
            StageConfig { repeats: 1, out_channels: 8, expansion_ratio: 2.0, stride: 2 },
        ],
        4,
        RES,
    )
}

fn augment() -> AugmentConfig {
    AugmentConfig::default().with_target(RES)
}

fn data(count: usize, seed: u64) -> LabeledSet {
    generate(&SyntheticConfig {
        count,
        size: RES,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

/// A model whose output is `softmax(head_bias)` for every input.
fn constant_model(head_bias: [f64; 4]) -> Model {
    let spec = tiny_spec();
    let template = build_model(&spec, &mut init_rng(0)).unwrap();
    let params = template
        .params()
        .iter()
        .zip(template.param_info())
        .map(|(p, info)| {
            if info.name == "head.bias" {
                Tensor::new(p.shape(), head_bias.to_vec()).unwrap()
            } else {
                Tensor::zeros(p.shape())
            }
        })
        .collect();
    Model::from_parameters(&spec, params).unwrap()
}

fn pseudo(rows: &[[f64; 4]], confidences: &[f64]) -> PseudoLabeledSet {
    let n = rows.len();
    let images = (0..n).map(|_| Arc::new(Image::filled(2, 2, [0.5; 3]))).collect();
    let ids = (0..n).map(|i| format!("u{i}")).collect();
    let labels = ClassMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    PseudoLabeledSet::with_confidences(ids, images, labels, confidences.to_vec()).unwrap()
}

fn loop_config(iterations: usize, seed: u64) -> SelfTrainConfig {
    SelfTrainConfig {
        iterations,
        train: TrainConfig {
            epochs: 2,
            seed,
            ..TrainConfig::default()
        },
        ..SelfTrainConfig::default()
    }
}

#[test]
fn uniform_teacher_gives_uniform_soft_labels() {
    let teacher = constant_model([0.0; 4]);
    let unlabeled = data(6, 1).to_unlabeled();
    let ps = pseudo_label(&teacher, &unlabeled, LabelMode::Soft, &augment()).unwrap();
    assert_eq!(ps.len(), 6);
    for row in ps.soft_labels().iter_rows() {
        assert_eq!(row, &[0.25; 4]);
    }
    assert!(ps.confidences().iter().all(|&c| c == 0.25));
}

#[test]
fn hard_labels_are_one_hot_argmax() {
    let teacher = constant_model([0.1f64.ln(), 0.2f64.ln(), 0.6f64.ln(), 0.1f64.ln()]);
    let unlabeled = data(4, 2).to_unlabeled();
    let ps = pseudo_label(&teacher, &unlabeled, LabelMode::Hard, &augment()).unwrap();
    for (row, &c) in ps.soft_labels().iter_rows().zip(ps.confidences()) {
        assert_eq!(row, &[0.0, 0.0, 1.0, 0.0]);
        assert!((c - 0.6).abs() < 1e-12, "{c}");
    }
}

#[test]
fn soft_labels_equal_direct_eval_forward_bitwise() {
    let teacher = build_model(&tiny_spec(), &mut init_rng(3)).unwrap();
    let before = teacher.clone();
    let unlabeled = data(10, 3).to_unlabeled();
    let ps = pseudo_label(&teacher, &unlabeled, LabelMode::Soft, &augment()).unwrap();

    let processed = preprocess_eval(unlabeled.images(), &augment()).unwrap();
    let refs: Vec<&Image> = processed.iter().collect();
    let batch = noisyleaf::augment::images_to_batch(&refs).unwrap();
    let direct = teacher.predict_proba(&batch).unwrap();
    assert_eq!(ps.soft_labels().data(), direct.data());
    assert_eq!(predict_preprocessed(&teacher, &processed).unwrap(), *ps.soft_labels());
    // Pseudo-labeling never mutates the teacher.
    assert_eq!(teacher, before);
}

#[test]
fn empty_unlabeled_set_is_an_error() {
    let teacher = constant_model([0.0; 4]);
    let empty = UnlabeledSet::new(Vec::new(), Vec::new()).unwrap();
    assert!(matches!(
        pseudo_label(&teacher, &empty, LabelMode::Soft, &augment()),
        Err(Error::EmptyUnlabeledSet)
    ));
}

#[test]
fn filtering_by_confidence() {
    let uniform = pseudo(&[[0.25; 4]; 3], &[0.25; 3]);
    assert_eq!(filter_pseudo(&uniform, 0.0).ids(), uniform.ids());
    assert!(filter_pseudo(&uniform, 0.6).is_empty());

    let rows = [[0.9, 0.1, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [0.7, 0.3, 0.0, 0.0]];
    let mixed = pseudo(&rows, &[0.9, 0.5, 0.7]);
    let kept = filter_pseudo(&mixed, 0.6);
    assert_eq!(kept.ids(), &["u0".to_owned(), "u2".to_owned()]);
    assert_eq!(kept.confidences(), &[0.9, 0.7]);
    assert_eq!(kept.soft_labels().row(1), &rows[2]);
}

#[test]
fn combining_concatenates_and_tags_origins() {
    let labeled = data(10, 4);
    let p = pseudo(&[[0.4, 0.3, 0.2, 0.1]; 5], &[0.4; 5]);
    let both = combine(&labeled, &p).unwrap();
    assert_eq!(both.len(), 15);
    assert_eq!(both.count_origin(Origin::Real), 10);
    assert_eq!(both.count_origin(Origin::Pseudo), 5);
    assert_eq!(&both.ids()[..10], labeled.ids());
    for row in both.labels().iter_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let empty = p.select(&[]);
    let same = combine(&labeled, &empty).unwrap();
    assert_eq!(same.ids(), labeled.ids());
    assert_eq!(same.labels(), labeled.labels());

    let images = vec![Arc::new(Image::filled(2, 2, [0.5; 3]))];
    let three = ClassMatrix::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
    let wrong = PseudoLabeledSet::new(vec!["x".into()], images, three).unwrap();
    assert!(matches!(combine(&labeled, &wrong), Err(Error::ColumnOrderMismatch)));
}

#[test]
fn student_growth() {
    let teacher = tiny_spec();
    assert_eq!(grow_student(&teacher, &ScaledDims::IDENTITY).unwrap(), teacher);

    let deep = grow_student(&teacher, &ScaledDims { d: 2.0, w: 1.0, r: 1.0 }).unwrap();
    let counts: Vec<usize> = deep.stage_counts().iter().map(|(_, n)| *n).collect();
    let base: Vec<usize> = teacher.stage_counts().iter().map(|(_, n)| *n).collect();
    assert_eq!(counts, base.iter().map(|n| 2 * n).collect::<Vec<_>>());

    let grown = grow_student(&teacher, &ScaledDims { d: 1.44, w: 1.21, r: 1.3225 }).unwrap();
    assert!(grown.parameter_count() > teacher.parameter_count());
    assert!(grown.input_resolution > teacher.input_resolution);

    assert!(matches!(
        grow_student(&teacher, &ScaledDims { d: 0.5, w: 1.0, r: 1.0 }),
        Err(Error::InvalidSpec(_))
    ));
}

#[test]
fn zero_iterations_is_supervised_teacher_only() {
    let all = data(24, 5);
    let (labeled, hidden) = all.stratified_split(0.5, 5).unwrap();
    let out = noisy_student_loop(&labeled, &hidden.to_unlabeled(), None, &tiny_spec(), &augment(), &loop_config(0, 5))
        .unwrap();
    assert_eq!(out.iterations.len(), 1);
    assert_eq!(out.pseudo_label_passes, 0);
    assert_eq!(out.iterations[0].train_size, labeled.len());
}

#[test]
fn k_iterations_train_k_plus_one_models_with_noise_only_in_students() {
    let all = data(32, 6);
    let (train, val) = all.stratified_split(0.75, 6).unwrap();
    let (labeled, hidden) = train.stratified_split(0.5, 6).unwrap();
    let unlabeled = hidden.to_unlabeled();
    let out =
        noisy_student_loop(&labeled, &unlabeled, Some(&val), &tiny_spec(), &augment(), &loop_config(2, 6)).unwrap();
    assert_eq!(out.iterations.len(), 3);
    assert_eq!(out.pseudo_label_passes, 2);

    let teacher = &out.iterations[0];
    assert_eq!(teacher.noise_draws, 0);
    assert_eq!(teacher.pseudo_labeled, 0);
    assert_eq!(teacher.spec.dropout_prob, 0.0);
    for student in &out.iterations[1..] {
        assert!(student.noise_draws > 0);
        assert_eq!(student.pseudo_labeled, unlabeled.len());
        assert_eq!(student.train_size, labeled.len() + unlabeled.len());
        assert_eq!(student.spec.dropout_prob, 0.2);
    }
    assert_eq!(out.model.spec(), &out.iterations[2].spec);
    assert_eq!(out.val_auc_table().len(), 3);
}

#[test]
fn empty_unlabeled_set_degrades_to_supervised_training() {
    let labeled = data(16, 7);
    let empty = UnlabeledSet::new(Vec::new(), Vec::new()).unwrap();
    let out = noisy_student_loop(&labeled, &empty, None, &tiny_spec(), &augment(), &loop_config(2, 7)).unwrap();
    assert_eq!(out.iterations.len(), 3);
    assert_eq!(out.pseudo_label_passes, 0);
    assert!(out.iterations.iter().all(|r| r.train_size == labeled.len() && r.pseudo_labeled == 0));
}

#[test]
fn threshold_that_rejects_everything_trains_on_labeled_data() {
    let all = data(24, 8);
    let (labeled, hidden) = all.stratified_split(0.5, 8).unwrap();
    let cfg = SelfTrainConfig {
        confidence_threshold: 0.99,
        ..loop_config(1, 8)
    };
    let out = noisy_student_loop(&labeled, &hidden.to_unlabeled(), None, &tiny_spec(), &augment(), &cfg).unwrap();
    // A two-epoch teacher is nowhere near 0.99 confident.
    assert_eq!(out.iterations[1].pseudo_labeled, 0);
    assert_eq!(out.iterations[1].train_size, labeled.len());
}

#[test]
fn loop_is_deterministic_for_a_seed() {
    let all = data(32, 9);
    let (train, val) = all.stratified_split(0.75, 9).unwrap();
    let (labeled, hidden) = train.stratified_split(0.5, 9).unwrap();
    let run = |seed| {
        noisy_student_loop(&labeled, &hidden.to_unlabeled(), Some(&val), &tiny_spec(), &augment(), &loop_config(1, seed))
            .unwrap()
    };
    let (a, b) = (run(9), run(9));
    assert_eq!(a.val_auc_table(), b.val_auc_table());
    assert_eq!(a.model, b.model);
    assert_ne!(a.model, run(10).model);
}
