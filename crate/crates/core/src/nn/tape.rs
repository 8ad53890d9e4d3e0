//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output and whatever it needs
//! to differentiate itself. [`Tape::backward`] walks the nodes once, from the
//! loss back to the first node.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{bail, Result};
use crate::nn::kernels::{self, ConvGeom, PoolGeom};
use crate::nn::layer::Padding;
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the batch itself.
    Batch { eps: T },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of rows the statistics were pooled over.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Param(String),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    GlobalMaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<T>,
    },
    SquaredError {
        x: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads<T> {
    params: BTreeMap<String, Tensor<T>>,
    vars: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient with respect to any recorded value that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A tape that keeps everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A forward-only tape; drops backward caches as it goes.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient (data, labels).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "input")
    }

    /// A non-parameter value whose gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// A named trainable parameter; its gradient lands in [`Grads::param`].
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Result<Var> {
        self.push(t.clone(), Op::Param(name.to_string()), true, name)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let geom = ConvGeom::resolve(&xs, self.value(w).shape(), stride, padding)?;
        if self.value(b).len() != geom.f {
            bail!(
                Dimension,
                "conv2d bias has {} entries, expected {}",
                self.value(b).len(),
                geom.f
            );
        }
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let shape = if xs.len() == 3 {
            vec![geom.oh, geom.ow, geom.f]
        } else {
            vec![geom.n, geom.oh, geom.ow, geom.f]
        };
        let rg = self.grad_flag(&[x, w, b]);
        let cols = if self.recording { cols } else { Vec::new() };
        self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d { x, w, b, geom, cols },
            rg,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.grad_flag(&[x]);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    /// Per-channel normalization over every axis but the last.
    ///
    /// Returns the batch statistics when normalizing with them, so the
    /// caller can fold them into running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            bail!(Dimension, "batchnorm scale/shift must have {c} entries");
        }
        let data = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                if xs.len() < 2 || xs[0] < 2 {
                    bail!(
                        Config,
                        "batch norm with batch statistics needs a batch of at least 2, got shape {xs:?}"
                    );
                }
                let (m, v) = kernels::channel_stats(data, c);
                (m, v, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    bail!(Dimension, "batchnorm running statistics must have {c} entries");
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let (y, xhat, inv_std) = kernels::batchnorm_apply(
            data,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let observed = batch_stats.then(|| BatchStats {
            count: data.len() / c,
            mean,
            var,
        });
        let rg = self.grad_flag(&[x, gamma, beta]);
        let xhat = if self.recording { xhat } else { Vec::new() };
        let out = self.push(
            Tensor::new(&xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
            "batchnorm",
        )?;
        Ok((out, observed))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let g = PoolGeom::resolve(&xs, window, stride)?;
        let (out, arg) = kernels::maxpool_forward(self.value(x).data(), &g);
        let shape = if xs.len() == 3 {
            vec![g.oh, g.ow, g.c]
        } else {
            vec![g.n, g.oh, g.ow, g.c]
        };
        let rg = self.grad_flag(&[x]);
        self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, arg }, rg, "maxpool2d")
    }

    /// `N×H×W×C → N×C` (or `H×W×C → C`).
    pub fn global_maxpool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, h, w, c, shape) = match *xs.as_slice() {
            [h, w, c] => (1, h, w, c, vec![c]),
            [n, h, w, c] => (n, h, w, c, vec![n, c]),
            _ => bail!(Dimension, "global max pool expects H×W×C or N×H×W×C, got {xs:?}"),
        };
        let (out, arg) = kernels::global_maxpool_forward(self.value(x).data(), n, h * w, c);
        let rg = self.grad_flag(&[x]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::GlobalMaxPool { x, arg },
            rg,
            "global_maxpool",
        )
    }

    /// Inverted dropout. Identity when `rate` is zero or `train` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate must lie in [0, 1), got {rate}");
        }
        if rate == 0.0 || !train {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Multiplies by a caller-supplied mask (already scaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            bail!(Dimension, "dropout mask has {} entries, input {}", mask.len(), xv.len());
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.grad_flag(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// `x · W + b` for `x` of shape `N×D` (or `D`), `W` of shape `D×M`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, d) = match *xs.as_slice() {
            [d] => (1, d),
            [n, d] => (n, d),
            _ => bail!(Dimension, "dense input must be rank 1 or 2, got {xs:?}"),
        };
        let ws = self.value(w).shape().to_vec();
        let [wd, m] = *ws.as_slice() else {
            bail!(Dimension, "dense weights must be D×M, got {ws:?}");
        };
        if wd != d {
            bail!(Dimension, "dense weights expect width {wd}, input has {d}");
        }
        if self.value(b).len() != m {
            bail!(Dimension, "dense bias has {} entries, expected {m}", self.value(b).len());
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(false, false, n, m, d, self.value(x).data(), self.value(w).data(), T::one(), &mut out);
        let shape = if xs.len() == 1 { vec![m] } else { vec![n, m] };
        let rg = self.grad_flag(&[x, w, b]);
        self.push(Tensor::new(&shape, out)?, Op::Dense { x, w, b }, rg, "dense")
    }

    /// Concatenates `N×Dᵢ` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat needs at least one input");
        };
        let n = self.value(first).batch();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                bail!(Dimension, "concat inputs must be N×D with N={n}, got {s:?}");
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.grad_flag(parts);
        self.push(
            Tensor::new(&[n, total], out)?,
            Op::Concat {
                parts: parts.iter().copied().zip(widths).collect(),
            },
            rg,
            "concat",
        )
    }

    /// Mean categorical cross-entropy of softmax(logits) against one-hot
    /// labels. Returns the scalar loss node and the probabilities.
    pub fn softmax_crossentropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<(Var, Tensor<T>)> {
        let ls = self.value(logits).shape().to_vec();
        let [n, l] = *ls.as_slice() else {
            bail!(Dimension, "logits must be batch×L, got {ls:?}");
        };
        if l < 2 {
            bail!(Input, "need at least 2 classes, got {l}");
        }
        if labels.shape() != ls.as_slice() {
            bail!(Dimension, "labels shape {:?} differs from logits {ls:?}", labels.shape());
        }
        for (i, row) in labels.data().chunks_exact(l).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != l - 1 {
                bail!(Input, "label row {i} is not one-hot");
            }
        }
        let z = self.value(logits).data();
        let probs = kernels::softmax_rows(z, l);
        let lse = kernels::log_sum_exp_rows(z, l);
        let mut total = T::zero();
        for ((row, lab), s) in z.chunks_exact(l).zip(labels.data().chunks_exact(l)).zip(&lse) {
            let true_logit: T = row.iter().zip(lab).map(|(&a, &b)| a * b).sum();
            total += *s - true_logit;
        }
        let loss = total / T::from_usize(n).unwrap();
        let probs_t = Tensor::new(&ls, probs.clone())?;
        let rg = self.grad_flag(&[logits]);
        let v = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.data().to_vec(),
            },
            rg,
            "softmax_crossentropy",
        )?;
        Ok((v, probs_t))
    }

    /// `½ Σ (x − target)²`.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            bail!(Dimension, "target shape {:?} differs from {:?}", target.shape(), xv.shape());
        }
        let half = T::lit(0.5);
        let loss: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| half * (a - b) * (a - b))
            .sum();
        let rg = self.grad_flag(&[x]);
        self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                x,
                target: target.data().to_vec(),
            },
            rg,
            "squared_error",
        )
    }

    /// Exact reverse-mode gradients of the scalar `loss`.
    ///
    /// Consumes the recorded operations; a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.nodes.is_empty() {
            bail!(State, "backward called before any forward operation");
        }
        if !self.recording {
            bail!(State, "backward called on an inference-only tape");
        }
        if self.consumed {
            bail!(State, "backward already ran on this tape");
        }
        if loss.0 >= self.nodes.len() || self.nodes[loss.0].value.len() != 1 {
            bail!(State, "backward needs a scalar loss produced by this tape");
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape(), g.clone())?;
                    match params.get_mut(name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                        None => {
                            params.insert(name.clone(), t);
                        }
                    }
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    if needs(*w) {
                        accumulate(&mut grads, *w, kernels::conv2d_weight_grad(cols, &g, geom));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, kernels::column_sums(&g, geom.f));
                    }
                    if needs(*x) {
                        let wv = self.nodes[w.0].value.data();
                        accumulate(&mut grads, *x, kernels::conv2d_input_grad(wv, &g, geom));
                    }
                }
                Op::Relu { x } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gv = self.nodes[gamma.0].value.data();
                    let (dx, dg, db) = if *batch_stats {
                        kernels::batchnorm_train_backward(&g, xhat, inv_std, gv)
                    } else {
                        kernels::batchnorm_fixed_backward(&g, xhat, inv_std, gv)
                    };
                    if needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads, *gamma, dg);
                    }
                    if needs(*beta) {
                        accumulate(&mut grads, *beta, db);
                    }
                }
                Op::MaxPool { x, arg } | Op::GlobalMaxPool { x, arg } => {
                    let len = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, kernels::route_grad(&g, arg, len));
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let ws = self.nodes[w.0].value.shape();
                    let (d, m) = (ws[0], ws[1]);
                    let n = xv.len() / d;
                    if needs(*w) {
                        let mut dw = vec![T::zero(); d * m];
                        gemm(true, false, d, m, n, xv.data(), &g, T::zero(), &mut dw);
                        accumulate(&mut grads, *w, dw);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, kernels::column_sums(&g, m));
                    }
                    if needs(*x) {
                        let mut dx = vec![T::zero(); n * d];
                        gemm(false, true, n, d, m, &g, self.nodes[w.0].value.data(), T::zero(), &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Concat { parts } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, width) in parts {
                        if needs(p) {
                            let dx = g
                                .chunks_exact(total)
                                .flat_map(|row| row[offset..offset + width].iter().copied())
                                .collect();
                            accumulate(&mut grads, p, dx);
                        }
                        offset += width;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                    let n = self.nodes[logits.0].value.batch();
                    let scale = g[0] / T::from_usize(n).unwrap();
                    let dz = probs.iter().zip(labels).map(|(&p, &y)| (p - y) * scale).collect();
                    accumulate(&mut grads, *logits, dz);
                }
                Op::SquaredError { x, target } => {
                    let xv = self.nodes[x.0].value.data();
                    let dx = xv.iter().zip(target).map(|(&a, &t)| (a - t) * g[0]).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }

        for (name, g) in &params {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        let vars = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => Tensor::new(node.value.shape(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(Grads { params, vars })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(g),
    }
}
