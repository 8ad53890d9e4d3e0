mod common;

use common::*;
use mrfusion::data::{synth_uniform, SynthConfig};
use mrfusion::forest::ForestConfig;
use mrfusion::model::ModelKind;
use mrfusion::training::{
    mean_std, predict_map, predict_samples, run_splits, train, MetricTable, SplitExperiment, SplitRow, TrainConfig,
};
use mrfusion::Error;

fn scene_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 4,
        objects_per_class: 6,
        scene_size: 128,
        seed,
        ..SynthConfig::default()
    }
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 2e-3,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_gives_one_record() {
    let (_, samples) = synthetic_samples(&scene_cfg(1), TINY_D, 2);
    let (m, h) = train(tiny_model(4, 0), &samples, &quick(1, 0)).unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert_eq!(h.best_epoch, 0);
    assert!(m.trained);
    assert_eq!(h.log_text().lines().count(), 1);
}

#[test]
fn loss_decreases() {
    let (_, samples) = synthetic_samples(&scene_cfg(2), TINY_D, 4);
    let (_, h) = train(tiny_model(4, 1), &samples, &quick(12, 1)).unwrap();
    let first = h.epochs[0].loss;
    let last = h.epochs.last().unwrap().loss;
    assert!(last < 0.7 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let (_, samples) = synthetic_samples(&scene_cfg(3), TINY_D, 2);
    let (a, ha) = train(tiny_model(4, 2), &samples, &quick(3, 5)).unwrap();
    let (b, hb) = train(tiny_model(4, 2), &samples, &quick(3, 5)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ha.deterministic_text(), hb.deterministic_text());
}

#[test]
fn returned_model_is_the_lowest_loss_epoch() {
    let (_, samples) = synthetic_samples(&scene_cfg(4), TINY_D, 2);
    let (m, h) = train(tiny_model(4, 3), &samples, &quick(8, 7)).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.loss).collect();
    let argmin = (0..losses.len()).fold(0, |b, i| if losses[i] < losses[b] { i } else { b });
    assert_eq!(h.best_epoch, argmin);
    // Per-epoch random streams do not depend on the epoch budget, so a
    // shorter run ends exactly at the snapshot.
    let (short, _) = train(tiny_model(4, 3), &samples, &quick(argmin + 1, 7)).unwrap();
    assert_eq!(short.params, m.params);
}

#[test]
fn non_finite_weights_report_divergence() {
    let (_, samples) = synthetic_samples(&scene_cfg(5), TINY_D, 1);
    let mut m = tiny_model(4, 0);
    m.params.get_mut("head/weights").unwrap().data_mut()[0] = f32::NAN;
    match train(m, &samples, &quick(2, 0)) {
        Err(Error::Diverged { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_bad_configuration() {
    let (_, samples) = synthetic_samples(&scene_cfg(5), TINY_D, 1);
    for cfg in [
        TrainConfig { epochs: 0, ..quick(1, 0) },
        TrainConfig { batch_size: 0, ..quick(1, 0) },
        TrainConfig { lr: -1.0, ..quick(1, 0) },
        TrainConfig { dropout: 1.0, ..quick(1, 0) },
    ] {
        assert!(matches!(train(tiny_model(4, 0), &samples, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn map_with_patch_stride_is_constant_per_tile() {
    let (rp, _) = synthetic_samples(&scene_cfg(6), TINY_D, 1);
    let m = tiny_model(4, 4);
    let map = predict_map(&m, &rp, TINY_D).unwrap();
    assert_eq!((map.labels.height, map.labels.width), (128, 128));
    assert_eq!(map.probs.shape(), [128, 128, 4]);
    for y in 0..128 {
        for x in 0..128 {
            let corner = map.labels.get(y / TINY_D * TINY_D, x / TINY_D * TINY_D);
            assert_eq!(map.labels.get(y, x), corner);
        }
    }
    for px in map.probs.data().chunks_exact(4) {
        assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(matches!(predict_map(&m, &rp, 0), Err(Error::Config(_))));
}

#[test]
fn dense_map_agrees_with_sample_predictions() {
    let (rp, samples) = synthetic_samples(&scene_cfg(7), TINY_D, 2);
    let m = tiny_model(4, 5);
    let map = predict_map(&m, &rp, 1).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let probs = predict_samples(&m, &refs).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let at = (s.anchor.y * 128 + s.anchor.x) * 4;
        for k in 0..4 {
            assert!((map.probs.data()[at + k] - probs.row(i)[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn trained_model_labels_a_uniform_scene() {
    let cfg = SynthConfig {
        objects_per_class: 10,
        scene_size: 192,
        ..scene_cfg(8)
    };
    let (rp, samples) = synthetic_samples(&cfg, TINY_D, 8);
    let (m, _) = train(tiny_model(4, 6), &samples, &quick(25, 8)).unwrap();
    let stats = rp.band_stats.clone().unwrap();
    let small = SynthConfig { scene_size: 64, ..cfg };
    for class in 1..=4 {
        let uniform = synth_uniform(&small, class).unwrap().normalized_with(&stats).unwrap();
        let map = predict_map(&m, &uniform, 4).unwrap();
        let hits = map.labels.data.iter().filter(|&&v| v == class).count();
        let frac = hits as f64 / map.labels.data.len() as f64;
        assert!(frac >= 0.95, "class {class}: {frac}");
    }
}

#[test]
fn single_split_has_zero_spread() {
    let (_, samples) = synthetic_samples(&scene_cfg(9), 32, 2);
    let exp = SplitExperiment {
        n_splits: 1,
        kinds: vec![ModelKind::PanOnly],
        train: quick(1, 0),
        augment: false,
        forest: Some(ForestConfig {
            n_trees: 5,
            ..ForestConfig::default()
        }),
        ..SplitExperiment::default()
    };
    let tables = run_splits(&samples, 4, &exp).unwrap();
    let names: Vec<&str> = tables.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["pan-only", "rf-pan-only"]);
    for t in &tables {
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.summary().std, [0.0; 3]);
        assert_eq!(t.to_csv().lines().count(), 4);
    }
}

#[test]
fn split_summary_matches_hand_computation() {
    let rows = [(0.9, 0.8, 0.7), (0.7, 0.6, 0.5), (0.8, 0.7, 0.9)];
    let t = MetricTable {
        name: "x".into(),
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, &(a, f, k))| SplitRow {
                split: i,
                accuracy: a,
                fmeasure: f,
                kappa: k,
            })
            .collect(),
    };
    let s = t.summary();
    assert!((s.mean[0] - 0.8).abs() < 1e-12);
    assert!((s.std[0] - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((s.mean[2] - 0.7).abs() < 1e-12);
    assert!((s.std[2] - (0.08f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
    let csv = t.to_csv();
    assert!(csv.starts_with("split,accuracy,fmeasure,kappa\n0,0.9,0.8,0.7\n"));
    assert!(csv.lines().nth(4).unwrap().starts_with("mean,"));
}

#[test]
fn best_model_loss_is_at_most_every_recorded_loss() {
    use mrfusion::training::stack_inputs;
    for seed in 0..3 {
        let (_, samples) = synthetic_samples(&scene_cfg(10 + seed), TINY_D, 4);
        let (m, h) = train(tiny_model(4, seed), &samples, &quick(10, seed)).unwrap();
        let refs: Vec<_> = samples.iter().collect();
        let inputs = stack_inputs(&refs, &m.sources()).unwrap();
        let labels: Vec<u32> = samples.iter().map(|s| s.label).collect();
        // Infer mode: no dropout, running batch-norm statistics.
        let loss = m.eval_loss(&inputs.iter().collect::<Vec<_>>(), &labels).unwrap() as f64;
        for e in &h.epochs {
            assert!(loss <= e.loss + 1e-5, "seed {seed}: {loss} > epoch {} loss {}", e.epoch, e.loss);
        }
    }
}
