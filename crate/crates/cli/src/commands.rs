use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mrfusion::data::manifest::default_class_names;
use mrfusion::data::raster::{read_labels, write_labels, MAGIC};
use mrfusion::data::{
    build_training_set, enumerate_samples, load_dataset, save_dataset, split_objects, synth_generate, Dataset,
    PatchPair, RasterPair, Side, SplitPlan, SynthConfig,
};
use mrfusion::forest::{fit, Forest, ForestConfig};
use mrfusion::metrics::{confusion, scores};
use mrfusion::model::{build_kind, FusionModel, ModelKind};
use mrfusion::training::{
    patch_size, predict_map, run_splits, sample_features, train, SplitExperiment, TrainConfig,
};
use mrfusion::{Error, Result, Tensor};

use crate::record::Record;
use crate::{Cli, Command, SamplingArgs};

pub fn run(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let mut rec = Record::new(argv);
    let out = match &cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                num_classes: a.classes,
                objects_per_class: a.objects,
                scene_size: a.size,
                ratio: a.ratio,
                bands: a.bands,
                seed: a.seed,
                with_fused: !a.no_fused,
                ..SynthConfig::default()
            };
            let ds = Dataset {
                scene: synth_generate(&cfg)?,
                class_names: default_class_names(a.classes),
            };
            let manifest = save_dataset(&a.out, &ds)?;
            info!("wrote {}", manifest.display());
            rec.seeds.push(("synth", a.seed));
            &a.out
        }
        Command::Split(a) => {
            let ds = load_dataset(&a.manifest)?;
            let plan = split_objects(&object_labels(&ds.scene), a.ratio, a.seed)?;
            plan.save(&a.out)?;
            info!(
                "{} training and {} test objects",
                plan.train_objects.len(),
                plan.test_objects.len()
            );
            rec.seeds.push(("split", a.seed));
            rec.dataset(&a.manifest);
            &a.out
        }
        Command::Train(a) => {
            let kind: ModelKind = a.model.parse()?;
            let (ds, rp) = load_normalized(&a.manifest)?;
            let plan = SplitPlan::load(&a.split)?;
            let model = build_kind::<f32>(kind, ds.num_classes(), a.seed)?;
            let samples = samples(&rp, &model, &a.sampling)?;
            let side = side_of(&samples, &plan, Side::Train)?;
            let set = if a.no_augment { side } else { build_training_set(&side, a.seed)? };
            info!("training {kind} on {} samples", set.len());
            let cfg = TrainConfig {
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch,
                seed: a.seed,
                ..TrainConfig::default()
            };
            let (model, history) = train(model, &set, &cfg)?;
            fs::create_dir_all(&a.out)?;
            let manifest = model.save(&a.out, "model", false)?;
            fs::write(a.out.join("history.tsv"), history.log_text())?;
            info!("best epoch {}; wrote {}", history.best_epoch, manifest.display());
            rec.seeds.push(("train", a.seed));
            rec.dataset(&a.manifest);
            rec.inputs.push(a.split.clone());
            &a.out
        }
        Command::Predict(a) => {
            let model = FusionModel::<f32>::load(&a.checkpoint)?;
            let (_, rp) = load_normalized(&a.manifest)?;
            let map = predict_map(&model, &rp, a.stride)?;
            write_labels(&a.out, &map.labels)?;
            rec.model(&a.checkpoint);
            rec.dataset(&a.manifest);
            &a.out
        }
        Command::ExtractFeatures(a) => {
            let side: Side = a.split_side.parse()?;
            let model = FusionModel::<f32>::load(&a.checkpoint)?;
            let (_, rp) = load_normalized(&a.manifest)?;
            let plan = SplitPlan::load(&a.split)?;
            let all = samples(&rp, &model, &a.sampling)?;
            let picked = side_of(&all, &plan, side)?;
            let (x, y) = features(&model, &picked)?;
            fs::write(&a.out, features_csv(&x, &y))?;
            rec.model(&a.checkpoint);
            rec.inputs.push(a.split.clone());
            rec.dataset(&a.manifest);
            &a.out
        }
        Command::RfFit(a) => {
            let (x, y) = match (&a.features, &a.manifest) {
                (Some(path), _) => {
                    rec.inputs.push(path.clone());
                    read_features(path)?
                }
                (None, Some(manifest)) => {
                    let (ckpt, split) = (a.checkpoint.as_ref().unwrap(), a.split.as_ref().unwrap());
                    let model = FusionModel::<f32>::load(ckpt)?;
                    let (_, rp) = load_normalized(manifest)?;
                    let all = samples(&rp, &model, &a.sampling)?;
                    let train_side = side_of(&all, &SplitPlan::load(split)?, Side::Train)?;
                    rec.model(ckpt);
                    rec.inputs.push(split.clone());
                    rec.dataset(manifest);
                    features(&model, &train_side)?
                }
                (None, None) => unreachable!("clap requires one of the sources"),
            };
            let cfg = ForestConfig {
                n_trees: a.trees,
                features_per_split: a.mtry,
                seed: a.seed,
                ..ForestConfig::default()
            };
            let forest = fit(&x, &y, &cfg)?;
            forest.save(&a.out)?;
            info!("fitted {} trees on {} samples", a.trees, y.len());
            rec.seeds.push(("forest", a.seed));
            &a.out
        }
        Command::RfPredict(a) => {
            let forest = Forest::load(&a.forest)?;
            let (x, y) = read_features(&a.features)?;
            let pred = forest.predict(&x)?;
            let mut s = String::from("truth,pred\n");
            for (t, p) in y.iter().zip(&pred) {
                writeln!(s, "{t},{p}").unwrap();
            }
            fs::write(&a.out, s)?;
            rec.inputs.extend([a.forest.clone(), a.features.clone()]);
            &a.out
        }
        Command::Evaluate(a) => {
            let (truth, pred) = read_pairs(&a.truth, &a.pred)?;
            let cm = confusion(&truth, &pred, a.classes)?;
            let s = scores(&cm)?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("scores.csv"), s.to_csv())?;
            fs::write(a.out.join("confusion.csv"), cm.to_csv())?;
            info!(
                "accuracy {:.4}, kappa {:.4}, weighted F {:.4} over {} samples",
                s.accuracy,
                s.kappa,
                s.f.weighted,
                truth.len()
            );
            rec.inputs.extend([a.truth.clone(), a.pred.clone()]);
            &a.out
        }
        Command::RunSplits(a) => {
            let kinds = a
                .models
                .split(',')
                .map(|k| k.trim().parse())
                .collect::<Result<Vec<ModelKind>>>()?;
            let (ds, rp) = load_normalized(&a.manifest)?;
            let probe = build_kind::<f32>(kinds[0], ds.num_classes(), 0)?;
            let samples = samples(&rp, &probe, &a.sampling)?;
            let exp = SplitExperiment {
                n_splits: a.n,
                ratio: a.ratio,
                seed: a.seed,
                kinds,
                train: TrainConfig {
                    epochs: a.epochs,
                    lr: a.lr,
                    batch_size: a.batch,
                    ..TrainConfig::default()
                },
                augment: !a.no_augment,
                forest: a.with_rf.then(|| ForestConfig {
                    n_trees: a.trees,
                    ..ForestConfig::default()
                }),
            };
            let tables = run_splits(&samples, ds.num_classes(), &exp)?;
            fs::create_dir_all(&a.out)?;
            for t in &tables {
                fs::write(a.out.join(format!("{}.csv", t.name)), t.to_csv())?;
                let s = t.summary();
                info!("{}: accuracy {:.4} ± {:.4}", t.name, s.mean[0], s.std[0]);
            }
            rec.seeds.push(("splits", a.seed));
            rec.dataset(&a.manifest);
            &a.out
        }
    };
    rec.outputs.push(out.clone());
    let path = rec.write(out)?;
    info!("run record {}", path.display());
    Ok(())
}

fn load_normalized(manifest: &Path) -> Result<(Dataset, RasterPair)> {
    let ds = load_dataset(manifest)?;
    let rp = ds.scene.normalized()?;
    Ok((ds, rp))
}

fn object_labels(rp: &RasterPair) -> BTreeMap<u32, u32> {
    rp.objects
        .data
        .iter()
        .zip(&rp.labels.data)
        .filter(|(&o, _)| o > 0)
        .map(|(&o, &l)| (o, l))
        .collect()
}

fn samples(rp: &RasterPair, model: &FusionModel<f32>, s: &SamplingArgs) -> Result<Vec<PatchPair>> {
    let d = patch_size(model, rp.ratio)?;
    let out = enumerate_samples(rp, d, s.per_object)?;
    info!("{} patches of {d}×{d}", out.len());
    Ok(out)
}

fn side_of(samples: &[PatchPair], plan: &SplitPlan, side: Side) -> Result<Vec<PatchPair>> {
    let keep = plan.side(side);
    let out: Vec<PatchPair> = samples.iter().filter(|p| keep.contains(&p.object_id)).cloned().collect();
    if out.is_empty() {
        return Err(Error::Split(format!("no patches fall on the {side:?} side of the split")));
    }
    Ok(out)
}

fn features(model: &FusionModel<f32>, samples: &[PatchPair]) -> Result<(Tensor<f32>, Vec<u32>)> {
    if !model.trained {
        warn!("extracting features from an untrained model");
    }
    let refs: Vec<&PatchPair> = samples.iter().collect();
    Ok((sample_features(model, &refs)?, samples.iter().map(|p| p.label).collect()))
}

fn features_csv(x: &Tensor<f32>, y: &[u32]) -> String {
    let f = x.shape()[1];
    let mut s = String::from("label");
    for j in 1..=f {
        write!(s, ",f{j}").unwrap();
    }
    s.push('\n');
    for (i, label) in y.iter().enumerate() {
        write!(s, "{label}").unwrap();
        for v in x.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Numeric rows of a CSV file, skipping a header line.
fn csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if n == 0 => {}
            Err(_) => return Err(Error::Format(format!("{}:{}: non-numeric field", path.display(), n + 1))),
        }
    }
    Ok(rows)
}

fn as_label(v: f64, path: &Path) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Format(format!("{}: {v} is not a class label", path.display())));
    }
    Ok(v as u32)
}

fn read_features(path: &Path) -> Result<(Tensor<f32>, Vec<u32>)> {
    let rows = csv_rows(path)?;
    let Some(first) = rows.first() else {
        return Err(Error::Input(format!("{} has no feature rows", path.display())));
    };
    let width = first.len() - 1;
    if width == 0 {
        return Err(Error::Format(format!("{}: rows need a label and features", path.display())));
    }
    let mut y = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width + 1 {
            return Err(Error::Format(format!("{}: row {} has {} fields", path.display(), i + 1, r.len())));
        }
        y.push(as_label(r[0], path)?);
        data.extend(r[1..].iter().map(|&v| v as f32));
    }
    Ok((Tensor::new(&[y.len(), width], data)?, y))
}

fn is_raster(path: &Path) -> Result<bool> {
    let bytes = fs::read(path)?;
    Ok(bytes.starts_with(MAGIC))
}

/// Ground truth and predictions as parallel label lists. Rasters are
/// compared on labeled pixels; CSV files take the truth from the first
/// column and the prediction from the last.
fn read_pairs(truth: &Path, pred: &Path) -> Result<(Vec<u32>, Vec<u32>)> {
    match (is_raster(truth)?, is_raster(pred)?) {
        (true, true) => {
            let (t, p) = (read_labels(truth)?, read_labels(pred)?);
            if (t.height, t.width) != (p.height, p.width) {
                return Err(Error::Dimension(format!(
                    "truth is {}×{}, prediction {}×{}",
                    t.height, t.width, p.height, p.width
                )));
            }
            Ok(t.data.iter().zip(&p.data).filter(|(&a, _)| a > 0).map(|(&a, &b)| (a, b)).unzip())
        }
        (false, false) => {
            let column = |path: &PathBuf, last: bool| -> Result<Vec<u32>> {
                csv_rows(path)?
                    .iter()
                    .map(|r| as_label(if last { *r.last().unwrap() } else { r[0] }, path))
                    .collect()
            };
            let (t, p) = (column(&truth.to_path_buf(), false)?, column(&pred.to_path_buf(), true)?);
            if t.len() != p.len() {
                return Err(Error::Input(format!("{} truth rows but {} predictions", t.len(), p.len())));
            }
            Ok((t, p))
        }
        _ => Err(Error::Format("truth and prediction must both be rasters or both CSV".into())),
    }
}
