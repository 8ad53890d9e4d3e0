mod common;

use std::collections::BTreeMap;

use common::*;
use mrfusion::data::manifest::default_class_names;
use mrfusion::data::split::train_count;
use mrfusion::data::{
    build_training_set, load_dataset, object_split, save_dataset, split_objects, synth_generate, Dataset, RasterPair,
    Side, SplitPlan, SynthConfig,
};
use mrfusion::forest::{fit, ForestConfig};
use mrfusion::{Error, Tensor};

fn cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 4,
        objects_per_class: 8,
        scene_size: 128,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset {
        scene: synth_generate(&cfg(1)).unwrap(),
        class_names: default_class_names(4),
    };
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.scene, ds.scene);
    assert_eq!(back.class_names, ["class1", "class2", "class3", "class4"]);
}

#[test]
fn dataset_rejects_labels_beyond_class_list() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset {
        scene: synth_generate(&cfg(1)).unwrap(),
        class_names: default_class_names(3),
    };
    let manifest = save_dataset(dir.path(), &ds).unwrap();
    assert!(load_dataset(&manifest).is_err());
}

#[test]
fn normalization_spans_unit_interval_per_band() {
    let rp = synth_generate(&cfg(2)).unwrap().normalized().unwrap();
    let images = [&rp.pan, &rp.ms, rp.fused.as_ref().unwrap()];
    for t in images {
        let c = t.shape()[2];
        for b in 0..c {
            let band: Vec<f32> = t.data().iter().skip(b).step_by(c).copied().collect();
            let lo = band.iter().copied().fold(f32::MAX, f32::min);
            let hi = band.iter().copied().fold(f32::MIN, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }
    // Re-applying the stored statistics reproduces the normalized scene.
    let raw = synth_generate(&cfg(2)).unwrap();
    assert_eq!(raw.normalized_with(rp.band_stats.as_ref().unwrap()).unwrap(), rp);
}

/// Mean MS vector of the blocks whose PAN pixels all carry `class`.
fn class_means(rp: &RasterPair) -> BTreeMap<u32, Vec<f64>> {
    let (r, c) = (rp.ratio, rp.bands());
    let m = rp.ms.shape()[1];
    let mut acc: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for my in 0..rp.ms.shape()[0] {
        for mx in 0..m {
            let lab = rp.labels.get(my * r, mx * r);
            let pure = (0..r).all(|dy| (0..r).all(|dx| rp.labels.get(my * r + dy, mx * r + dx) == lab));
            if lab == 0 || !pure {
                continue;
            }
            let e = acc.entry(lab).or_insert((vec![0.0; c], 0));
            for b in 0..c {
                e.0[b] += rp.ms.data()[(my * m + mx) * c + b] as f64;
            }
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s.iter().map(|v| v / n as f64).collect()))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn spectral_twins_share_ms_signal() {
    for seed in 0..5 {
        let means = class_means(&synth_generate(&cfg(seed)).unwrap());
        // Digital numbers are reflectance × 1000.
        assert!(dist(&means[&1], &means[&2]) < 60.0, "seed {seed}");
        assert!(dist(&means[&3], &means[&4]) < 60.0, "seed {seed}");
        assert!(dist(&means[&1], &means[&3]) > 100.0, "seed {seed}");
    }
}

/// Forest accuracy on held-out objects using MS pixels of two classes.
fn ms_pixel_accuracy(rp: &RasterPair, a: u32, b: u32) -> f64 {
    let (r, c) = (rp.ratio, rp.bands());
    let m = rp.ms.shape()[1];
    let mut rows = Vec::new();
    for my in 0..rp.ms.shape()[0] {
        for mx in 0..m {
            let (y, x) = (my * r + r / 2, mx * r + r / 2);
            let lab = rp.labels.get(y, x);
            if lab == a || lab == b {
                let v = &rp.ms.data()[(my * m + mx) * c..(my * m + mx + 1) * c];
                rows.push((rp.objects.get(y, x), if lab == a { 1 } else { 2 }, v.to_vec()));
            }
        }
    }
    let labels: BTreeMap<u32, u32> = rows.iter().map(|r| (r.0, r.1)).collect();
    let plan = split_objects(&labels, 0.5, 0).unwrap();
    let side = |s: Side| {
        let picked: Vec<_> = rows.iter().filter(|r| plan.side(s).contains(&r.0)).collect();
        let x = Tensor::new(&[picked.len(), c], picked.iter().flat_map(|r| r.2.clone()).collect()).unwrap();
        (x, picked.iter().map(|r| r.1).collect::<Vec<u32>>())
    };
    let (xtr, ytr) = side(Side::Train);
    let (xte, yte) = side(Side::Test);
    let forest = fit(&xtr, &ytr, &ForestConfig { n_trees: 50, ..ForestConfig::default() }).unwrap();
    let pred = forest.predict(&xte).unwrap();
    pred.iter().zip(&yte).filter(|(p, t)| p == t).count() as f64 / yte.len() as f64
}

#[test]
fn ms_pixels_cannot_separate_spectral_twins() {
    let rp = synth_generate(&SynthConfig {
        objects_per_class: 12,
        scene_size: 256,
        ..cfg(5)
    })
    .unwrap();
    let twins = ms_pixel_accuracy(&rp, 1, 2);
    let distinct = ms_pixel_accuracy(&rp, 1, 3);
    assert!((0.35..0.65).contains(&twins), "twins {twins}");
    assert!(distinct > 0.95, "distinct {distinct}");
}

#[test]
fn object_split_respects_ratio_and_classes() {
    let (_, samples) = synthetic_samples(&cfg(6), 16, 3);
    let plan = object_split(&samples, 0.3, 9).unwrap();
    assert!(plan.train_objects.is_disjoint(&plan.test_objects));
    assert_eq!(plan.train_objects.len() + plan.test_objects.len(), 32);
    // Per class: round(0.3 × 8) = 2 training objects.
    assert_eq!(train_count(8, 0.3), 2);
    assert_eq!(plan.train_objects.len(), 8);
    let (tr, te) = plan.partition(&samples);
    assert_eq!(tr.len() + te.len(), samples.len());
    assert!(tr.iter().all(|s| plan.train_objects.contains(&s.object_id)));
    assert_ne!(object_split(&samples, 0.3, 10).unwrap().train_objects, plan.train_objects);
}

#[test]
fn split_plan_text_round_trip() {
    let (_, samples) = synthetic_samples(&cfg(7), 16, 1);
    let plan = object_split(&samples, 0.5, 3).unwrap();
    assert_eq!(SplitPlan::from_text(&plan.to_text()).unwrap(), plan);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.txt");
    plan.save(&path).unwrap();
    assert_eq!(SplitPlan::load(&path).unwrap(), plan);
}

#[test]
fn split_needs_two_objects_per_class() {
    let labels: BTreeMap<u32, u32> = [(1, 1), (2, 1), (3, 2)].into_iter().collect();
    assert!(matches!(split_objects(&labels, 0.5, 0), Err(Error::Split(_))));
    let ok: BTreeMap<u32, u32> = [(1, 1), (2, 1)].into_iter().collect();
    assert!(matches!(split_objects(&ok, 1.0, 0), Err(Error::Config(_))));
}

#[test]
fn training_set_triples_with_distinct_views() {
    let (_, samples) = synthetic_samples(&cfg(8), 16, 1);
    let set = build_training_set(&samples, 4).unwrap();
    assert_eq!(set.len(), 3 * samples.len());
    for (orig, group) in samples.iter().zip(set.chunks_exact(3)) {
        assert_eq!(&group[0], orig);
        assert!(group.iter().all(|p| p.label == orig.label && p.anchor == orig.anchor));
        assert_ne!(group[1].pan, group[2].pan);
    }
    assert_eq!(build_training_set(&samples, 4).unwrap(), set);
}
