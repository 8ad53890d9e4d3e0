//! Branch topologies and the two-branch fusion classifier.
//!
//! A [`FusionModel`] runs one convolutional branch per input source, drops
//! out and concatenates the per-branch feature vectors (PAN first, then MS),
//! and classifies them with a single dense layer followed by softmax.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::nn::kernels::softmax_rows;
use crate::nn::{checkpoint, he_uniform, BatchStats, LayerSpec, NormStats, ParamSet, Tape, Var, BN_EPS};
use crate::tensor::{gemm, Real, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.4;

/// Which raster a branch consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputSource {
    Pan,
    Ms,
    /// A full-resolution multi-band image (e.g. pansharpened).
    Fused,
}

impl fmt::Display for InputSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputSource::Pan => "pan",
            InputSource::Ms => "ms",
            InputSource::Fused => "fused",
        })
    }
}

impl FromStr for InputSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pan" => Ok(InputSource::Pan),
            "ms" => Ok(InputSource::Ms),
            "fused" => Ok(InputSource::Fused),
            _ => bail!(Format, "unknown input source '{s}'"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    MrFusion,
    CnnPs,
    /// Fusion model with the MS branch removed.
    PanOnly,
    /// Fusion model with the PAN branch removed.
    MsOnly,
    Custom,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::MrFusion => "mrfusion",
            ModelKind::CnnPs => "cnnps",
            ModelKind::PanOnly => "pan-only",
            ModelKind::MsOnly => "ms-only",
            ModelKind::Custom => "custom",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrfusion" => Ok(ModelKind::MrFusion),
            "cnnps" => Ok(ModelKind::CnnPs),
            "pan-only" => Ok(ModelKind::PanOnly),
            "ms-only" => Ok(ModelKind::MsOnly),
            "custom" => Ok(ModelKind::Custom),
            _ => bail!(Config, "unknown model kind '{s}'"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    /// `(H, W, C)` of one input patch.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl BranchConfig {
    /// Three conv stages with the given kernels and filter counts, each
    /// followed by ReLU and batch norm, an optional 2×2 max pool after each
    /// stage, and a terminal global max pool.
    pub fn stages(input_shape: [usize; 3], stages: &[(usize, usize)], pool: bool) -> Self {
        let mut layers = Vec::new();
        for &(k, f) in stages {
            layers.push(LayerSpec::conv(k, f));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::BatchNorm);
            if pool {
                layers.push(LayerSpec::pool(2));
            }
        }
        layers.push(LayerSpec::GlobalMaxPool);
        Self { input_shape, layers }
    }

    /// Output shape after every layer, starting with the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.contains(&0) {
            bail!(Config, "branch input shape must be positive");
        }
        if self.layers.last() != Some(&LayerSpec::GlobalMaxPool) {
            bail!(Config, "branch must end with a global max pool");
        }
        let mut last_filters = 0;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv2d { filters, .. } => {
                    if *filters < last_filters {
                        bail!(
                            Config,
                            "conv filter counts must not decrease along a branch ({last_filters} then {filters})"
                        );
                    }
                    last_filters = *filters;
                }
                LayerSpec::Dense { .. } | LayerSpec::Softmax | LayerSpec::Dropout { .. } => {
                    bail!(Config, "layer '{layer}' is not allowed inside a branch")
                }
                _ => {}
            }
        }
        self.shapes().map(|_| ())
    }

    pub fn feature_len(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        match shapes.last().map(Vec::as_slice) {
            Some([n]) => Ok(*n),
            _ => bail!(Config, "branch does not end in a feature vector"),
        }
    }

    fn layers_text(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// PAN branch: 7×7→128, 3×3→256, 3×3→512, each conv followed by ReLU,
/// batch norm and a 2×2 max pool; global max pool to 512 features.
pub fn build_pcnn() -> BranchConfig {
    BranchConfig::stages([32, 32, 1], &[(7, 128), (3, 256), (3, 512)], true)
}

/// MS branch: 3×3 convs to 256, 512, 1024 maps with no pooling between
/// stages; global max pool to 1024 features.
pub fn build_mscnn() -> BranchConfig {
    BranchConfig::stages([8, 8, 4], &[(3, 256), (3, 512), (3, 1024)], false)
}

/// Single-branch competitor on a full-resolution 4-band patch: the PAN
/// topology with 256/512/1024 filters.
pub fn build_cnnps_branch() -> BranchConfig {
    BranchConfig::stages([32, 32, 4], &[(7, 256), (3, 512), (3, 1024)], true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub name: String,
    pub source: InputSource,
    pub config: BranchConfig,
}

impl Branch {
    pub fn new(name: &str, source: InputSource, config: BranchConfig) -> Self {
        Self {
            name: name.to_string(),
            source,
            config,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Concatenated branch features plus whether they came from a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub matrix: Tensor<T>,
    pub trained: bool,
}

/// Loss, probabilities and gradients of one training batch.
#[derive(Debug)]
pub struct StepOutput<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub grads: BTreeMap<String, Tensor<T>>,
}

struct Graph<T> {
    logits: Var,
    features: Var,
    stats: Vec<(String, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T: Real = f32> {
    pub kind: ModelKind,
    pub branches: Vec<Branch>,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub params: ParamSet<T>,
    /// Set once weights come out of training or a trained checkpoint.
    pub trained: bool,
}

pub fn build_mrfusion<T: Real>(num_classes: usize, seed: u64) -> Result<FusionModel<T>> {
    FusionModel::new(
        ModelKind::MrFusion,
        vec![
            Branch::new("pan", InputSource::Pan, build_pcnn()),
            Branch::new("ms", InputSource::Ms, build_mscnn()),
        ],
        num_classes,
        DEFAULT_DROPOUT,
        seed,
    )
}

pub fn build_cnnps<T: Real>(num_classes: usize, seed: u64) -> Result<FusionModel<T>> {
    FusionModel::new(
        ModelKind::CnnPs,
        vec![Branch::new("fused", InputSource::Fused, build_cnnps_branch())],
        num_classes,
        DEFAULT_DROPOUT,
        seed,
    )
}

/// Builds one of the named architectures.
pub fn build_kind<T: Real>(kind: ModelKind, num_classes: usize, seed: u64) -> Result<FusionModel<T>> {
    let pan = || Branch::new("pan", InputSource::Pan, build_pcnn());
    let ms = || Branch::new("ms", InputSource::Ms, build_mscnn());
    match kind {
        ModelKind::MrFusion => build_mrfusion(num_classes, seed),
        ModelKind::CnnPs => build_cnnps(num_classes, seed),
        ModelKind::PanOnly => FusionModel::new(kind, vec![pan()], num_classes, DEFAULT_DROPOUT, seed),
        ModelKind::MsOnly => FusionModel::new(kind, vec![ms()], num_classes, DEFAULT_DROPOUT, seed),
        ModelKind::Custom => bail!(Config, "custom models need explicit branches"),
    }
}

impl<T: Real> FusionModel<T> {
    /// Builds the architecture and initializes weights (He-uniform weights,
    /// zero biases, unit scale, zero shift) from `seed`.
    pub fn new(
        kind: ModelKind,
        branches: Vec<Branch>,
        num_classes: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {num_classes}");
        }
        if branches.is_empty() {
            bail!(Config, "a model needs at least one branch");
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            bail!(Config, "dropout rate must lie in [0, 1), got {dropout_rate}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut width = 0;
        for b in &branches {
            b.config.validate()?;
            let shapes = b.config.shapes()?;
            for (i, layer) in b.config.layers.iter().enumerate() {
                let input = &shapes[i];
                match *layer {
                    LayerSpec::Conv2d { kernel, filters, .. } => {
                        let c = input[2];
                        params.insert_trainable(
                            &format!("{}/conv{i}/weights", b.name),
                            he_uniform(&[kernel, kernel, c, filters], kernel * kernel * c, &mut rng),
                        );
                        params.insert_trainable(&format!("{}/conv{i}/bias", b.name), Tensor::zeros(&[filters]));
                    }
                    LayerSpec::BatchNorm => {
                        let c = input[2];
                        params.insert_trainable(&format!("{}/bn{i}/gamma", b.name), Tensor::full(&[c], T::one()));
                        params.insert_trainable(&format!("{}/bn{i}/beta", b.name), Tensor::zeros(&[c]));
                        params.insert_buffer(&format!("{}/bn{i}/running_mean", b.name), Tensor::zeros(&[c]));
                        params.insert_buffer(&format!("{}/bn{i}/running_var", b.name), Tensor::full(&[c], T::one()));
                    }
                    _ => {}
                }
            }
            width += b.config.feature_len()?;
        }
        params.insert_trainable("head/weights", he_uniform(&[width, num_classes], width, &mut rng));
        params.insert_trainable("head/bias", Tensor::zeros(&[num_classes]));
        Ok(Self {
            kind,
            branches,
            dropout_rate,
            num_classes,
            params,
            trained: false,
        })
    }

    /// Width of the concatenated feature vector.
    pub fn feature_len(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.config.feature_len().expect("validated at construction"))
            .sum()
    }

    pub fn sources(&self) -> Vec<InputSource> {
        self.branches.iter().map(|b| b.source).collect()
    }

    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<usize> {
        if inputs.len() != self.branches.len() {
            bail!(
                Input,
                "model has {} branches, got {} inputs",
                self.branches.len(),
                inputs.len()
            );
        }
        let n = inputs[0].shape()[0];
        for (b, x) in self.branches.iter().zip(inputs) {
            let want = b.config.input_shape;
            let s = x.shape();
            if s.len() != 4 || s[1..] != want {
                bail!(
                    Input,
                    "branch '{}' expects batch×{}×{}×{}, got {:?}",
                    b.name,
                    want[0],
                    want[1],
                    want[2],
                    s
                );
            }
            if s[0] != n {
                bail!(Input, "batch size mismatch between branches ({} vs {n})", s[0]);
            }
        }
        Ok(n)
    }

    fn graph(
        &self,
        tape: &mut Tape<T>,
        inputs: &[&Tensor<T>],
        mut train_rng: Option<&mut dyn RngCore>,
    ) -> Result<Graph<T>> {
        self.check_inputs(inputs)?;
        let train = train_rng.is_some();
        let eps = T::lit(BN_EPS);
        let mut stats = Vec::new();
        let mut feats = Vec::with_capacity(self.branches.len());
        for (b, &input) in self.branches.iter().zip(inputs) {
            let mut x = tape.input(input.clone())?;
            for (i, layer) in b.config.layers.iter().enumerate() {
                x = match *layer {
                    LayerSpec::Conv2d { stride, padding, .. } => {
                        let w = tape.param(&format!("{}/conv{i}/weights", b.name), self.params.get(&format!("{}/conv{i}/weights", b.name))?)?;
                        let bias = tape.param(&format!("{}/conv{i}/bias", b.name), self.params.get(&format!("{}/conv{i}/bias", b.name))?)?;
                        tape.conv2d(x, w, bias, stride, padding)?
                    }
                    LayerSpec::Relu => tape.relu(x)?,
                    LayerSpec::BatchNorm => {
                        let prefix = format!("{}/bn{i}", b.name);
                        let gamma = tape.param(&format!("{prefix}/gamma"), self.params.get(&format!("{prefix}/gamma"))?)?;
                        let beta = tape.param(&format!("{prefix}/beta"), self.params.get(&format!("{prefix}/beta"))?)?;
                        let norm = if train {
                            NormStats::Batch { eps }
                        } else {
                            NormStats::Fixed {
                                mean: self.params.get(&format!("{prefix}/running_mean"))?.data(),
                                var: self.params.get(&format!("{prefix}/running_var"))?.data(),
                                eps,
                            }
                        };
                        let (y, observed) = tape.batchnorm(x, gamma, beta, norm)?;
                        if let Some(s) = observed {
                            stats.push((prefix, s));
                        }
                        y
                    }
                    LayerSpec::MaxPool2d { window, stride } => tape.maxpool2d(x, window, stride)?,
                    LayerSpec::GlobalMaxPool => tape.global_maxpool(x)?,
                    _ => bail!(Config, "layer '{layer}' is not allowed inside a branch"),
                };
            }
            if let Some(rng) = train_rng.as_deref_mut() {
                x = tape.dropout(x, self.dropout_rate, true, rng)?;
            }
            feats.push(x);
        }
        let features = if feats.len() == 1 { feats[0] } else { tape.concat(&feats)? };
        let w = tape.param("head/weights", self.params.get("head/weights")?)?;
        let bias = tape.param("head/bias", self.params.get("head/bias")?)?;
        let logits = tape.dense(features, w, bias)?;
        Ok(Graph {
            logits,
            features,
            stats,
        })
    }

    fn fold_stats(&mut self, stats: Vec<(String, BatchStats<T>)>) -> Result<()> {
        for (prefix, s) in stats {
            self.params.update_running_stats(
                &format!("{prefix}/running_mean"),
                &format!("{prefix}/running_var"),
                &s.mean,
                &s.var,
                s.count,
            )?;
        }
        Ok(())
    }

    /// Class probabilities (`batch × L`). Train mode samples dropout masks
    /// from `rng`, normalizes with batch statistics and folds those into
    /// the running estimates; infer mode is deterministic.
    pub fn forward<R: RngCore>(&mut self, inputs: &[&Tensor<T>], mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        match mode {
            Mode::Infer => self.predict_proba(inputs),
            Mode::Train => {
                let mut tape = Tape::inference();
                let g = self.graph(&mut tape, inputs, Some(rng))?;
                let logits = tape.value(g.logits);
                let probs = Tensor::new(logits.shape(), softmax_rows(logits.data(), self.num_classes))?;
                self.fold_stats(g.stats)?;
                Ok(probs)
            }
        }
    }

    /// Infer-mode class probabilities: `softmax(dense(extract_features))`.
    pub fn predict_proba(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let f = self.extract_features(inputs)?;
        self.classify_features(&f.matrix)
    }

    /// Infer-mode concatenated branch features (`batch × feature_len`).
    pub fn extract_features(&self, inputs: &[&Tensor<T>]) -> Result<Features<T>> {
        let mut tape = Tape::inference();
        let g = self.graph(&mut tape, inputs, None)?;
        Ok(Features {
            matrix: tape.value(g.features).clone(),
            trained: self.trained,
        })
    }

    /// Applies the dense head and softmax to a feature matrix.
    pub fn classify_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.params.get("head/weights")?;
        let b = self.params.get("head/bias")?;
        let (d, l) = (w.shape()[0], w.shape()[1]);
        if features.rank() != 2 || features.shape()[1] != d {
            bail!(Dimension, "features must be batch×{d}, got {:?}", features.shape());
        }
        let n = features.batch();
        let mut logits = Vec::with_capacity(n * l);
        for _ in 0..n {
            logits.extend_from_slice(b.data());
        }
        gemm(false, false, n, l, d, features.data(), w.data(), T::one(), &mut logits);
        let probs = Tensor::new(&[n, l], softmax_rows(&logits, l))?;
        probs.ensure_finite("probabilities")?;
        Ok(probs)
    }

    /// Train-mode forward and backward on one batch. Running statistics are
    /// updated; weights are not (see [`ParamSet::adam_step`]).
    pub fn train_step<R: Rng>(
        &mut self,
        inputs: &[&Tensor<T>],
        labels: &[u32],
        rng: &mut R,
    ) -> Result<StepOutput<T>> {
        let n = self.check_inputs(inputs)?;
        if labels.len() != n {
            bail!(Input, "{} labels for a batch of {n}", labels.len());
        }
        let onehot = one_hot(labels, self.num_classes)?;
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, inputs, Some(rng))?;
        let (loss, probs) = tape.softmax_crossentropy(g.logits, &onehot)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?.into_params();
        self.fold_stats(g.stats)?;
        Ok(StepOutput {
            loss: loss_value,
            probs,
            grads,
        })
    }

    /// Mean cross-entropy in infer mode.
    pub fn eval_loss(&self, inputs: &[&Tensor<T>], labels: &[u32]) -> Result<T> {
        let probs = self.predict_proba(inputs)?;
        let l = self.num_classes;
        let mut total = T::zero();
        for (row, &y) in probs.data().chunks_exact(l).zip(labels) {
            total -= row[label_index(y, l)?].ln();
        }
        Ok(total / T::from_usize(labels.len().max(1)).unwrap())
    }

    /// Key=value description of the architecture, written beside each
    /// checkpoint so the model can be rebuilt without code changes.
    pub fn manifest(&self, checkpoint: &Path) -> String {
        let mut s = String::new();
        s.push_str(&format!("kind={}\n", self.kind));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        s.push_str(&format!("dropout={}\n", self.dropout_rate));
        s.push_str(&format!(
            "branches={}\n",
            self.branches.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(",")
        ));
        for b in &self.branches {
            let [h, w, c] = b.config.input_shape;
            s.push_str(&format!("branch.{}.source={}\n", b.name, b.source));
            s.push_str(&format!("branch.{}.input={h}x{w}x{c}\n", b.name));
            s.push_str(&format!("branch.{}.layers={}\n", b.name, b.config.layers_text()));
        }
        s.push_str(&format!("head=dense{},softmax\n", self.num_classes));
        s.push_str(&format!("checkpoint={}\n", checkpoint.display()));
        s.push_str(&format!("trained={}\n", self.trained));
        s
    }
}

impl FusionModel<f32> {
    /// Writes `<stem>.mrfw` and `<stem>.model` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, with_adam: bool) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let ckpt_name = format!("{stem}.mrfw");
        checkpoint::save(&self.params, with_adam, &dir.join(&ckpt_name))?;
        let manifest = dir.join(format!("{stem}.model"));
        fs::write(&manifest, self.manifest(Path::new(&ckpt_name)))?;
        Ok(manifest)
    }

    /// Rebuilds a model from its manifest and restores the checkpoint it
    /// names (relative paths resolve against the manifest's directory).
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let kv = parse_kv(&text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("model manifest lacks '{k}'")))
        };
        let kind: ModelKind = get("kind")?.parse()?;
        let num_classes: usize = parse_num(get("num_classes")?)?;
        let dropout: f64 = get("dropout")?
            .parse()
            .map_err(|_| Error::Format("bad dropout value".into()))?;
        let mut branches = Vec::new();
        for name in get("branches")?.split(',') {
            let source: InputSource = get(&format!("branch.{name}.source"))?.parse()?;
            let dims: Vec<usize> = get(&format!("branch.{name}.input"))?
                .split('x')
                .map(parse_num)
                .collect::<Result<_>>()?;
            let [h, w, c] = dims[..] else {
                bail!(Format, "branch '{name}' input must be HxWxC");
            };
            let layers = get(&format!("branch.{name}.layers"))?
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<LayerSpec>>>()?;
            branches.push(Branch::new(name, source, BranchConfig { input_shape: [h, w, c], layers }));
        }
        let mut model = FusionModel::new(kind, branches, num_classes, dropout, 0)?;
        let ckpt = PathBuf::from(get("checkpoint")?);
        let ckpt = if ckpt.is_relative() {
            manifest.parent().unwrap_or(Path::new(".")).join(ckpt)
        } else {
            ckpt
        };
        checkpoint::load(&ckpt)?.restore_into(&mut model.params)?;
        model.trained = get("trained")? == "true";
        Ok(model)
    }
}

pub fn label_index(label: u32, num_classes: usize) -> Result<usize> {
    if label == 0 || label as usize > num_classes {
        bail!(Label, "label {label} outside 1..={num_classes}");
    }
    Ok(label as usize - 1)
}

/// One-hot rows for 1-based class labels.
pub fn one_hot<T: Real>(labels: &[u32], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * num_classes + label_index(y, num_classes)?] = T::one();
    }
    Tensor::new(&[labels.len(), num_classes], data)
}

pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Format, "line {}: expected key=value", i + 1);
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

fn parse_num(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("expected an integer, got '{s}'")))
}
