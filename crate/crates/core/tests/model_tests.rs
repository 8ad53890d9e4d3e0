mod common;

use common::*;
use mrfusion::model::{build_cnnps, build_kind, build_mrfusion, FusionModel, InputSource, Mode, ModelKind};
use mrfusion::{Error, Tensor};

#[test]
fn architecture_widths() {
    let m = build_mrfusion::<f32>(13, 0).unwrap();
    assert_eq!(m.feature_len(), 1536);
    assert_eq!(m.params.get("head/weights").unwrap().shape(), [1536, 13]);
    assert_eq!(m.sources(), [InputSource::Pan, InputSource::Ms]);
    let m = build_mrfusion::<f32>(8, 0).unwrap();
    assert_eq!(m.params.get("head/weights").unwrap().shape(), [1536, 8]);
    let c = build_cnnps::<f32>(8, 0).unwrap();
    assert_eq!(c.feature_len(), 1024);
    assert_eq!(c.sources(), [InputSource::Fused]);
    assert_eq!(build_kind::<f32>(ModelKind::PanOnly, 4, 0).unwrap().feature_len(), 512);
    assert_eq!(build_kind::<f32>(ModelKind::MsOnly, 4, 0).unwrap().feature_len(), 1024);
}

#[test]
fn full_model_probabilities_are_distributions() {
    let m = build_mrfusion::<f32>(5, 1).unwrap();
    let mut r = rng(2);
    let pan = Tensor::from_fn(&[3, 32, 32, 1], |_| rand::Rng::random_range(&mut r, 0.0..1.0));
    let ms = Tensor::from_fn(&[3, 8, 8, 4], |_| rand::Rng::random_range(&mut r, 0.0..1.0));
    let p = m.predict_proba(&[&pan, &ms]).unwrap();
    assert_eq!(p.shape(), [3, 5]);
    for row in p.data().chunks_exact(5) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn identical_samples_give_identical_rows() {
    let m = tiny_model(4, 3);
    let (pan, ms) = tiny_inputs(1, &mut rng(4));
    let pan2 = Tensor::stack(&[&pan.reshape(&[16, 16, 1]).unwrap(); 3]).unwrap();
    let ms2 = Tensor::stack(&[&ms.reshape(&[4, 4, 4]).unwrap(); 3]).unwrap();
    let p = m.predict_proba(&[&pan2, &ms2]).unwrap();
    assert_eq!(p.row(0), p.row(1));
    assert_eq!(p.row(0), p.row(2));
}

#[test]
fn rejects_mismatched_batches_and_shapes() {
    let m = tiny_model(3, 0);
    let (pan, _) = tiny_inputs(2, &mut rng(5));
    let (_, ms) = tiny_inputs(3, &mut rng(6));
    assert!(matches!(m.predict_proba(&[&pan, &ms]), Err(Error::Input(_))));
    assert!(matches!(m.predict_proba(&[&pan]), Err(Error::Input(_))));
    let wrong = Tensor::zeros(&[2, 8, 8, 1]);
    let (_, ms2) = tiny_inputs(2, &mut rng(6));
    assert!(matches!(m.predict_proba(&[&wrong, &ms2]), Err(Error::Input(_))));
}

#[test]
fn needs_two_classes() {
    assert!(matches!(build_mrfusion::<f32>(1, 0), Err(Error::Config(_))));
    assert!(matches!(build_kind::<f32>(ModelKind::Custom, 3, 0), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(tiny_model(3, 9).params, tiny_model(3, 9).params);
    assert_ne!(tiny_model(3, 9).params, tiny_model(3, 10).params);
}

#[test]
fn train_mode_updates_running_statistics_only() {
    let mut m = tiny_model(3, 1);
    let before = m.params.clone();
    let (pan, ms) = tiny_inputs(4, &mut rng(7));
    let p = m.forward(&[&pan, &ms], Mode::Train, &mut rng(8)).unwrap();
    assert_eq!(p.shape(), [4, 3]);
    for (name, entry) in m.params.iter() {
        let same = entry.value == before.get(name).unwrap().clone();
        assert_eq!(same, entry.trainable(), "{name}");
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(3, 2);
    m.trained = true;
    let manifest = m.save(dir.path(), "tiny", false).unwrap();
    let back = FusionModel::load(&manifest).unwrap();
    assert_eq!(back.params, m.params);
    assert!(back.trained);
    assert_eq!(back.kind, ModelKind::Custom);
    let (pan, ms) = tiny_inputs(2, &mut rng(3));
    assert_eq!(back.predict_proba(&[&pan, &ms]).unwrap(), m.predict_proba(&[&pan, &ms]).unwrap());
}

#[test]
fn features_then_head_equals_forward() {
    let m = tiny_model(4, 5);
    let (pan, ms) = tiny_inputs(5, &mut rng(9));
    let f = m.extract_features(&[&pan, &ms]).unwrap();
    assert_eq!(f.matrix.shape(), [5, 22]);
    assert!(!f.trained);
    assert_eq!(m.classify_features(&f.matrix).unwrap(), m.predict_proba(&[&pan, &ms]).unwrap());
}
