//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use mrfusion::data::{enumerate_samples, synth_generate, PatchPair, RasterPair, SynthConfig};
use mrfusion::metrics::ConfusionMatrix;
use mrfusion::model::{Branch, BranchConfig, FusionModel, InputSource, ModelKind};
use mrfusion::nn::{Padding, Tape, Var};
use mrfusion::{Result, Tensor};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least 0.05 away from zero, so ReLU is smooth under ±h.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder with steps of 0.01: every max is unique by a margin
/// far larger than the finite-difference step.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps exact zeros from
/// turning rounding noise into large ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between reverse-mode gradients of `f` with
/// respect to each input and central differences with step `h`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = xs.iter().map(|x| t.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf gradient").clone();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// `½‖y − target‖²` with a target drawn from `seed`.
pub fn quadratic(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let target = uniform(&shape, &mut rng(seed), -1.0, 1.0);
    tape.squared_error(y, &target)
}

/// Direct nested-loop convolution (zero padding), `n×H×W×C` input.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, padding: Padding) -> Tensor<f64> {
    let (n, h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, f) = (w.shape()[0], w.shape()[3]);
    let pad = if padding == Padding::Same { k / 2 } else { 0 };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * oh * ow * f];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ff in 0..f {
                    let mut acc = b[ff];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for cc in 0..c {
                                acc += w.data()[((ky * k + kx) * c + cc) * f + ff]
                                    * x.data()[((s * h + iy as usize) * wd + ix as usize) * c + cc];
                            }
                        }
                    }
                    out[((s * oh + oy) * ow + ox) * f + ff] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, f], out).unwrap()
}

/// Scores computed in exact rational arithmetic from the textbook
/// definitions (precision and recall first, then their harmonic mean).
pub struct ExactScores {
    pub accuracy: f64,
    pub kappa: f64,
    pub per_class_f: Vec<f64>,
}

pub fn exact_scores(cm: &ConfusionMatrix) -> ExactScores {
    let l = cm.classes();
    let q = |v: u64| BigRational::from_integer(BigInt::from(v));
    let n: u64 = (0..l).flat_map(|t| (0..l).map(move |p| (t, p))).map(|(t, p)| cm.get(t, p)).sum();
    let total = q(n);
    let row = |t: usize| (0..l).map(|p| cm.get(t, p)).sum::<u64>();
    let col = |p: usize| (0..l).map(|t| cm.get(t, p)).sum::<u64>();
    let trace: u64 = (0..l).map(|i| cm.get(i, i)).sum();
    let po = q(trace) / &total;
    let mut pe = BigRational::zero();
    for k in 0..l {
        pe += (q(row(k)) / &total) * (q(col(k)) / &total);
    }
    let one = q(1);
    let kappa = if pe == one {
        BigRational::zero()
    } else {
        (&po - &pe) / (&one - &pe)
    };
    let per_class_f = (0..l)
        .map(|k| {
            let tp = cm.get(k, k);
            if tp == 0 {
                return 0.0;
            }
            let precision = q(tp) / q(col(k));
            let recall = q(tp) / q(row(k));
            let f = q(2) * &precision * &recall / (&precision + &recall);
            f.to_f64().unwrap()
        })
        .collect();
    ExactScores {
        accuracy: po.to_f64().unwrap(),
        kappa: kappa.to_f64().unwrap(),
        per_class_f,
    }
}

pub fn random_confusion(rng: &mut ChaCha8Rng, l: usize) -> ConfusionMatrix {
    let rows: Vec<Vec<u64>> = (0..l)
        .map(|t| {
            (0..l)
                .map(|p| {
                    let zero = rng.random_bool(0.3);
                    let big = if t == p { 200 } else { 60 };
                    if zero {
                        0
                    } else {
                        rng.random_range(0..big)
                    }
                })
                .collect()
        })
        .collect();
    let mut cm = ConfusionMatrix::from_rows(&rows).unwrap();
    if cm.total() == 0 {
        cm.add(1, 1).unwrap();
    }
    cm
}

/// Normalized synthetic scene and its capped sample list.
pub fn synthetic_samples(cfg: &SynthConfig, d: usize, cap: usize) -> (RasterPair, Vec<PatchPair>) {
    let rp = synth_generate(cfg).unwrap().normalized().unwrap();
    let samples = enumerate_samples(&rp, d, Some(cap)).unwrap();
    (rp, samples)
}

/// Patch side of [`tiny_model`] at ratio 4.
pub const TINY_D: usize = 16;

/// Two-branch model small enough for property tests: a 16×16 PAN patch
/// and a 4×4×4 MS patch.
pub fn tiny_model(num_classes: usize, seed: u64) -> FusionModel<f32> {
    FusionModel::new(
        ModelKind::Custom,
        vec![
            Branch::new("pan", InputSource::Pan, BranchConfig::stages([16, 16, 1], &[(3, 8), (3, 12)], true)),
            Branch::new("ms", InputSource::Ms, BranchConfig::stages([4, 4, 4], &[(3, 8), (3, 10)], false)),
        ],
        num_classes,
        0.4,
        seed,
    )
    .unwrap()
}

/// Random `batch` PAN and MS patches shaped for [`tiny_model`].
pub fn tiny_inputs(batch: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let pan = Tensor::from_fn(&[batch, 16, 16, 1], |_| rng.random_range(0.0..1.0));
    let ms = Tensor::from_fn(&[batch, 4, 4, 4], |_| rng.random_range(0.0..1.0));
    (pan, ms)
}
