use noisyleaf::augment::AugmentConfig;
use noisyleaf::ensemble::{combine_predictions, ensemble_predict, Ensemble};
use noisyleaf::nn::{build_model, init_rng, Model, ModelSpec, StageConfig};
use noisyleaf::optim::predict;
use noisyleaf::synthetic::{generate, SyntheticConfig};
use noisyleaf::Error;

fn spec(resolution: usize, classes: usize) -> ModelSpec {
    ModelSpec::from_stages(
        4,
        &[
            StageConfig { repeats: 1, out_channels: 4, expansion_ratio: 2.0, stride: 1 },
            StageConfig { repeats: 1, out_channels: 8, expansion_ratio: 2.0, stride: 2 },
        ],
        classes,
        resolution,
    )
}

fn model(seed: u64, resolution: usize) -> Model {
    build_model(&spec(resolution, 4), &mut init_rng(seed)).unwrap()
}

fn images() -> Vec<std::sync::Arc<noisyleaf::augment::Image>> {
    generate(&SyntheticConfig {
        count: 12,
        size: 24,
        ..SyntheticConfig::default()
    })
    .unwrap()
    .images()
    .to_vec()
}

#[test]
fn singleton_and_duplicate_members_reproduce_the_model() {
    let (m, imgs, aug) = (model(1, 16), images(), AugmentConfig::default());
    let alone = predict(&m, &imgs, &aug).unwrap();
    let one = ensemble_predict(&Ensemble::new(vec![m.clone()]).unwrap(), &imgs, &aug).unwrap();
    let two = ensemble_predict(&Ensemble::new(vec![m.clone(), m.clone()]).unwrap(), &imgs, &aug).unwrap();
    assert_eq!(one, alone);
    assert_eq!(two, alone);
}

#[test]
fn members_may_differ_in_resolution() {
    let members = vec![model(1, 16), model(2, 20), model(3, 12)];
    let (imgs, aug) = (images(), AugmentConfig::default());
    let e = Ensemble::new(members.clone()).unwrap();
    let combined = ensemble_predict(&e, &imgs, &aug).unwrap();
    let each: Vec<_> = members.iter().map(|m| predict(m, &imgs, &aug).unwrap()).collect();
    for i in 0..combined.data().len() {
        let vals: Vec<f64> = each.iter().map(|p| p.data()[i]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = combined.data()[i];
        assert!(v >= lo - 1e-15 && v <= hi + 1e-15, "entry {i} is not a convex combination");
        assert!((v - vals.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }
    for row in combined.iter_rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn member_order_does_not_matter() {
    let members: Vec<Model> = (0..5).map(|s| model(s, 16)).collect();
    let (imgs, aug) = (images(), AugmentConfig::default());
    let preds: Vec<_> = members.iter().map(|m| predict(m, &imgs, &aug).unwrap()).collect();
    let forward = combine_predictions(&preds, None).unwrap();
    for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 2, 3, 4, 0]] {
        let permuted: Vec<_> = order.iter().map(|&k| preds[k].clone()).collect();
        let other = combine_predictions(&permuted, None).unwrap();
        for (a, b) in forward.data().iter().zip(other.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let w = [0.1, 0.2, 0.3, 0.15, 0.25];
    let weighted = combine_predictions(&preds, Some(&w)).unwrap();
    let rev_preds: Vec<_> = preds.iter().rev().cloned().collect();
    let rev_w: Vec<f64> = w.iter().rev().copied().collect();
    let reversed = combine_predictions(&rev_preds, Some(&rev_w)).unwrap();
    for (a, b) in weighted.data().iter().zip(reversed.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn weighted_ensemble_uses_the_weights() {
    let (a, b) = (model(1, 16), model(2, 16));
    let (imgs, aug) = (images(), AugmentConfig::default());
    let e = Ensemble::new(vec![a.clone(), b]).unwrap().with_weights(vec![1.0, 0.0]).unwrap();
    let only_a = ensemble_predict(&e, &imgs, &aug).unwrap();
    let direct = predict(&a, &imgs, &aug).unwrap();
    for (x, y) in only_a.data().iter().zip(direct.data()) {
        assert_eq!(x, y);
    }
}

#[test]
fn invalid_ensembles_are_rejected() {
    assert!(matches!(Ensemble::new(Vec::new()), Err(Error::EmptyEnsemble)));
    let three = build_model(&spec(16, 3), &mut init_rng(0)).unwrap();
    assert!(matches!(
        Ensemble::new(vec![model(0, 16), three]),
        Err(Error::ClassCountMismatch(4, 3))
    ));
    let pair = Ensemble::new(vec![model(0, 16), model(1, 16)]).unwrap();
    assert!(pair.clone().with_weights(vec![0.5, 0.6]).is_err());
    assert!(pair.clone().with_weights(vec![1.5, -0.5]).is_err());
    assert!(pair.with_weights(vec![1.0]).is_err());
}
