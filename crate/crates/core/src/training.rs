//! Training loop, sample evaluation, map prediction and repeated-split
//! experiments.

use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::augment::build_training_set;
use crate::data::patch::{extract_clamped, Anchor, PatchPair};
use crate::data::raster::LabelGrid;
use crate::data::scene::RasterPair;
use crate::data::split::object_split;
use crate::error::{bail, Error, Result};
use crate::forest::{self, ForestConfig};
use crate::metrics::{confusion, scores, Scores};
use crate::model::{build_kind, FusionModel, InputSource, ModelKind, DEFAULT_DROPOUT};
use crate::nn::AdamConfig;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 250;
pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BATCH: usize = 32;
/// Samples per inference batch.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            seed: 0,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.batch_size < 2 {
            bail!(Config, "batch size must be at least 2 for batch normalization");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout rate must lie in [0, 1), got {}", self.dropout);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss (train mode).
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One tab-separated `epoch loss acc seconds` line per epoch.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}\t{:.6}\t{:.4}\t{:.2}", e.epoch, e.loss, e.accuracy, e.seconds).unwrap();
        }
        s
    }

    /// Same lines without timings, stable across runs.
    pub fn deterministic_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}\t{:e}\t{:e}", e.epoch, e.loss, e.accuracy).unwrap();
        }
        s
    }
}

/// Stacks one input tensor per source.
pub fn stack_inputs(samples: &[&PatchPair], sources: &[InputSource]) -> Result<Vec<Tensor<f32>>> {
    if samples.is_empty() {
        bail!(Input, "empty batch");
    }
    sources
        .iter()
        .map(|&s| {
            let parts = samples.iter().map(|p| p.source(s)).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts)
        })
        .collect()
}

/// Splits `n` shuffled positions into batches; a final batch of one
/// sample joins the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn epoch_rngs(seed: u64, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(2 * epoch as u64);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(2 * epoch as u64 + 1);
    (shuffle, dropout)
}

/// Trains from the model's current weights and returns the parameters
/// (and optimizer state) of the epoch with the lowest mean training loss.
pub fn train(
    mut model: FusionModel<f32>,
    samples: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<(FusionModel<f32>, TrainHistory)> {
    cfg.validate()?;
    if samples.len() < 2 {
        bail!(Input, "training needs at least 2 samples, got {}", samples.len());
    }
    for s in samples {
        crate::model::label_index(s.label, model.num_classes)?;
    }
    model.dropout_rate = cfg.dropout;
    let sources = model.sources();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best: Option<(f64, crate::nn::ParamSet<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut shuffle_rng, mut dropout_rng) = epoch_rngs(cfg.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let batch: Vec<&PatchPair> = idx.iter().map(|&i| &samples[i]).collect();
            let labels: Vec<u32> = batch.iter().map(|p| p.label).collect();
            let inputs = stack_inputs(&batch, &sources)?;
            let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: b,
                detail,
            };
            let step = model.train_step(&refs, &labels, &mut dropout_rng).map_err(|e| match e {
                Error::Numeric(m) => diverged(m),
                other => other,
            })?;
            if !step.loss.is_finite() {
                return Err(diverged(format!("loss is {}", step.loss)));
            }
            model.params.adam_step(&step.grads, &adam).map_err(|e| match e {
                Error::Numeric(m) => diverged(m),
                other => other,
            })?;
            loss_sum += step.loss as f64 * batch.len() as f64;
            correct += (0..batch.len())
                .filter(|&i| argmax(step.probs.row(i)) as u32 + 1 == labels[i])
                .count();
        }
        let n = samples.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}\tloss {:.5}\tacc {:.4}\t{:.1}s",
            record.loss, record.accuracy, record.seconds
        );
        if best.as_ref().map_or(true, |(l, _)| record.loss < *l) {
            best = Some((record.loss, model.params.clone()));
            history.best_epoch = epoch;
        }
        history.epochs.push(record);
    }
    model.params = best.expect("at least one epoch").1;
    model.trained = true;
    Ok((model, history))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Infer-mode class probabilities for samples, `n × L`.
pub fn predict_samples(model: &FusionModel<f32>, samples: &[&PatchPair]) -> Result<Tensor<f32>> {
    let sources = model.sources();
    let parts = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let inputs = stack_inputs(chunk, &sources)?;
            model.predict_proba(&inputs.iter().collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts, model.num_classes)
}

/// Infer-mode feature matrix for samples, `n × feature_len`.
pub fn sample_features(model: &FusionModel<f32>, samples: &[&PatchPair]) -> Result<Tensor<f32>> {
    let sources = model.sources();
    let parts = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let inputs = stack_inputs(chunk, &sources)?;
            Ok(model.extract_features(&inputs.iter().collect::<Vec<_>>())?.matrix)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts, model.feature_len())
}

fn concat_rows(parts: &[Tensor<f32>], width: usize) -> Result<Tensor<f32>> {
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    if data.is_empty() {
        bail!(Input, "no samples to evaluate");
    }
    Tensor::new(&[data.len() / width, width], data)
}

/// 1-based argmax labels of a probability matrix.
pub fn labels_of(probs: &Tensor<f32>) -> Vec<u32> {
    (0..probs.batch()).map(|i| argmax(probs.row(i)) as u32 + 1).collect()
}

/// Scores of `model` on `samples`.
pub fn evaluate(model: &FusionModel<f32>, samples: &[&PatchPair]) -> Result<Scores> {
    let pred = labels_of(&predict_samples(model, samples)?);
    let truth: Vec<u32> = samples.iter().map(|p| p.label).collect();
    scores(&confusion(&truth, &pred, model.num_classes)?)
}

/// Class map at PAN resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPrediction {
    pub labels: LabelGrid,
    /// `H × W × L`.
    pub probs: Tensor<f32>,
}

/// PAN patch size implied by the model's branch inputs.
pub fn patch_size(model: &FusionModel<f32>, ratio: usize) -> Result<usize> {
    let mut d = None;
    for b in &model.branches {
        let side = b.config.input_shape[0];
        let pan_side = match b.source {
            InputSource::Ms => side * ratio,
            InputSource::Pan | InputSource::Fused => side,
        };
        match d {
            None => d = Some(pan_side),
            Some(prev) if prev != pan_side => {
                bail!(Dimension, "branches disagree on the PAN patch size ({prev} vs {pan_side}) at ratio {ratio}")
            }
            _ => {}
        }
    }
    Ok(d.expect("models have at least one branch"))
}

/// Anchors along one axis of length `n`: the pixel at offset `s/2` of each
/// stride block, clamped into the scene.
fn axis_anchors(n: usize, s: usize) -> Vec<usize> {
    (0..n.div_ceil(s)).map(|b| (b * s + s / 2).min(n - 1)).collect()
}

/// Classifies every stride-block anchor with edge-clamped windows and
/// paints each block with its anchor's prediction.
pub fn predict_map(model: &FusionModel<f32>, rp: &RasterPair, stride: usize) -> Result<MapPrediction> {
    if stride == 0 {
        bail!(Config, "stride must be at least 1");
    }
    let d = patch_size(model, rp.ratio)?;
    let (h, w) = rp.pan_size();
    if h < d || w < d {
        bail!(Dimension, "scene {h}×{w} is smaller than the {d}×{d} patch");
    }
    let sources = model.sources();
    let ys = axis_anchors(h, stride);
    let xs = axis_anchors(w, stride);
    let anchors: Vec<Anchor> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Anchor::new(x, y)))
        .collect();
    let probs = anchors
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let mut per_source: Vec<Vec<Tensor<f32>>> = vec![Vec::with_capacity(chunk.len()); sources.len()];
            for &a in chunk {
                for (slot, t) in per_source.iter_mut().zip(extract_clamped(rp, a, d, &sources)?) {
                    slot.push(t);
                }
            }
            let inputs = per_source
                .iter()
                .map(|ts| Tensor::stack(&ts.iter().collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            model.predict_proba(&inputs.iter().collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let l = model.num_classes;
    let probs = concat_rows(&probs, l)?;
    let mut labels = LabelGrid::new(h, w);
    let mut out = vec![0.0f32; h * w * l];
    for y in 0..h {
        for x in 0..w {
            let a = (y / stride) * xs.len() + x / stride;
            let row = probs.row(a);
            labels.set(y, x, argmax(row) as u32 + 1);
            out[(y * w + x) * l..(y * w + x + 1) * l].copy_from_slice(row);
        }
    }
    Ok(MapPrediction {
        labels,
        probs: Tensor::new(&[h, w, l], out)?,
    })
}

/// One evaluated split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRow {
    pub split: usize,
    pub accuracy: f64,
    pub fmeasure: f64,
    pub kappa: f64,
}

impl SplitRow {
    fn new(split: usize, s: &Scores) -> Self {
        Self {
            split,
            accuracy: s.accuracy,
            fmeasure: s.f.weighted,
            kappa: s.kappa,
        }
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub name: String,
    pub rows: Vec<SplitRow>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl MetricTable {
    pub fn summary(&self) -> Summary {
        let col = |f: fn(&SplitRow) -> f64| mean_std(&self.rows.iter().map(f).collect::<Vec<_>>());
        let (a, b, c) = (col(|r| r.accuracy), col(|r| r.fmeasure), col(|r| r.kappa));
        Summary {
            mean: [a.0, b.0, c.0],
            std: [a.1, b.1, c.1],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,accuracy,fmeasure,kappa\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.split, r.accuracy, r.fmeasure, r.kappa).unwrap();
        }
        let sm = self.summary();
        writeln!(s, "mean,{},{},{}", sm.mean[0], sm.mean[1], sm.mean[2]).unwrap();
        writeln!(s, "std,{},{},{}", sm.std[0], sm.std[1], sm.std[2]).unwrap();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitExperiment {
    pub n_splits: usize,
    pub ratio: f64,
    pub seed: u64,
    pub kinds: Vec<ModelKind>,
    pub train: TrainConfig,
    pub augment: bool,
    /// Also fit a forest on each model's features.
    pub forest: Option<ForestConfig>,
}

impl Default for SplitExperiment {
    fn default() -> Self {
        Self {
            n_splits: 10,
            ratio: crate::data::split::DEFAULT_TRAIN_RATIO,
            seed: 0,
            kinds: vec![ModelKind::MrFusion],
            train: TrainConfig::default(),
            augment: true,
            forest: None,
        }
    }
}

/// For split `i` (seed `seed + i`): split objects, train each model kind,
/// score it on the test side, and optionally score a forest fitted on the
/// model's training-set features. Tables are named after the model kind,
/// with `rf-` in front for the forests.
pub fn run_splits(samples: &[PatchPair], num_classes: usize, exp: &SplitExperiment) -> Result<Vec<MetricTable>> {
    if exp.n_splits == 0 {
        bail!(Config, "need at least one split");
    }
    let mut tables: Vec<MetricTable> = Vec::new();
    let mut push = |name: String, row: SplitRow| match tables.iter_mut().find(|t| t.name == name) {
        Some(t) => t.rows.push(row),
        None => tables.push(MetricTable { name, rows: vec![row] }),
    };
    for i in 0..exp.n_splits {
        let seed = exp.seed + i as u64;
        let plan = object_split(samples, exp.ratio, seed)?;
        let (train_side, test_side) = plan.partition(samples);
        let owned: Vec<PatchPair>;
        let train_set: Vec<PatchPair> = if exp.augment {
            owned = train_side.into_iter().cloned().collect();
            build_training_set(&owned, seed)?
        } else {
            train_side.into_iter().cloned().collect()
        };
        info!(
            "split {i}: {} training samples, {} test samples",
            train_set.len(),
            test_side.len()
        );
        for &kind in &exp.kinds {
            let model = build_kind(kind, num_classes, seed)?;
            let cfg = TrainConfig {
                seed,
                ..exp.train.clone()
            };
            let (model, _) = train(model, &train_set, &cfg)?;
            let s = evaluate(&model, &test_side)?;
            info!("split {i} {kind}: accuracy {:.4}", s.accuracy);
            push(kind.to_string(), SplitRow::new(i, &s));
            if let Some(fc) = &exp.forest {
                let train_refs: Vec<&PatchPair> = train_set.iter().collect();
                let fx = sample_features(&model, &train_refs)?;
                let fy: Vec<u32> = train_set.iter().map(|p| p.label).collect();
                let forest = forest::fit(&fx, &fy, &ForestConfig { seed, ..fc.clone() })?;
                let pred = forest.predict(&sample_features(&model, &test_side)?)?;
                let truth: Vec<u32> = test_side.iter().map(|p| p.label).collect();
                let s = scores(&confusion(&truth, &pred, num_classes)?)?;
                info!("split {i} rf-{kind}: accuracy {:.4}", s.accuracy);
                push(format!("rf-{kind}"), SplitRow::new(i, &s));
            }
        }
    }
    Ok(tables)
}
