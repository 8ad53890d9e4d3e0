//! Random forest of CART trees with Gini splits.
//!
//! Split thresholds are actual training values (`x ≤ largest value on the
//! left`), never midpoints, so predictions are invariant under any strictly
//! increasing per-feature rescaling applied to both training and test data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MRRF1";
pub const DEFAULT_TREES: usize = 400;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means `⌊√features⌋`.
    pub features_per_split: Option<usize>,
    /// Train each tree on a bootstrap resample of size `n`.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    /// Class fractions of the training samples that reached the leaf.
    Leaf(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf_for(&self, row: &[f32]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(h) => return h,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub num_classes: usize,
    pub num_features: usize,
    pub trees: Vec<DecisionTree>,
}

fn rows(x: &Tensor<f32>) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, f] => Ok((n, f)),
        _ => bail!(Dimension, "feature matrix must be samples×features, got {:?}", x.shape()),
    }
}

pub fn fit(x: &Tensor<f32>, y: &[u32], cfg: &ForestConfig) -> Result<Forest> {
    let (n, f) = rows(x)?;
    if y.len() != n {
        bail!(Input, "{n} feature rows but {} labels", y.len());
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        bail!(Config, "forest needs at least one tree and min_leaf ≥ 1");
    }
    if y.contains(&0) {
        bail!(Label, "class labels are 1-based");
    }
    x.ensure_finite("forest training features")?;
    let num_classes = *y.iter().max().unwrap() as usize;
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        warn!("all training samples belong to class {first}; the forest is a constant predictor");
    }
    let mtry = cfg
        .features_per_split
        .unwrap_or(((f as f64).sqrt() as usize).max(1))
        .clamp(1, f);
    let builder = Builder {
        x: x.data(),
        f,
        y,
        classes: num_classes,
        mtry,
        cfg,
    };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            builder.grow(&mut rng)
        })
        .collect();
    Ok(Forest {
        num_classes,
        num_features: f,
        trees,
    })
}

struct Builder<'a> {
    x: &'a [f32],
    f: usize,
    y: &'a [u32],
    classes: usize,
    mtry: usize,
    cfg: &'a ForestConfig,
}

struct Candidate {
    score: f64,
    feature: usize,
    threshold: f32,
    left_len: usize,
}

impl Builder<'_> {
    fn value(&self, i: usize, feature: usize) -> f32 {
        self.x[i * self.f + feature]
    }

    fn histogram(&self, idx: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.classes];
        for &i in idx {
            h[self.y[i] as usize - 1] += 1.0;
        }
        h
    }

    fn grow(&self, rng: &mut ChaCha8Rng) -> DecisionTree {
        let n = self.y.len();
        let root: Vec<usize> = if self.cfg.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut perm: Vec<usize> = (0..self.f).collect();
        let mut nodes = vec![Node::Leaf(Vec::new())];
        let mut stack = vec![(0usize, root, 0usize)];
        while let Some((at, mut idx, depth)) = stack.pop() {
            let hist = self.histogram(&idx);
            let pure = hist.iter().filter(|&&c| c > 0.0).count() <= 1;
            let capped = self.cfg.max_depth.is_some_and(|d| depth >= d);
            let split = if pure || capped || idx.len() < 2 * self.cfg.min_leaf {
                None
            } else {
                self.best_split(&mut idx, &mut perm, rng)
            };
            match split {
                None => {
                    let total = idx.len() as f64;
                    nodes[at] = Node::Leaf(hist.iter().map(|c| c / total).collect());
                }
                Some(c) => {
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| self.value(i, c.feature) <= c.threshold);
                    debug_assert_eq!(left.len(), c.left_len);
                    let (l, r) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes.push(Node::Leaf(Vec::new()));
                    nodes[at] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: l,
                        right: r,
                    };
                    stack.push((r, right, depth + 1));
                    stack.push((l, left, depth + 1));
                }
            }
        }
        DecisionTree { nodes }
    }

    /// Examines `mtry` features drawn without replacement; if none of them
    /// separates the node, keeps drawing until one does or all are spent.
    fn best_split(&self, idx: &mut [usize], perm: &mut [usize], rng: &mut ChaCha8Rng) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for k in 0..self.f {
            if k >= self.mtry && best.is_some() {
                break;
            }
            let j = rng.random_range(k..self.f);
            perm.swap(k, j);
            if let Some(c) = self.scan_feature(idx, perm[k]) {
                if best.as_ref().map_or(true, |b| c.score > b.score) {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Best Gini split on one feature. Maximizes
    /// `Σ l_k²/n_l + Σ r_k²/n_r`, which minimizes weighted Gini impurity.
    fn scan_feature(&self, idx: &mut [usize], feature: usize) -> Option<Candidate> {
        idx.sort_by(|&a, &b| self.value(a, feature).total_cmp(&self.value(b, feature)));
        let n = idx.len();
        let mut right = self.histogram(idx);
        let mut left = vec![0.0; self.classes];
        let mut sq_right: f64 = right.iter().map(|c| c * c).sum();
        let mut sq_left = 0.0;
        let mut best: Option<Candidate> = None;
        for pos in 0..n - 1 {
            let k = self.y[idx[pos]] as usize - 1;
            sq_left += 2.0 * left[k] + 1.0;
            left[k] += 1.0;
            sq_right -= 2.0 * right[k] - 1.0;
            right[k] -= 1.0;
            let (nl, nr) = (pos + 1, n - pos - 1);
            if nl < self.cfg.min_leaf || nr < self.cfg.min_leaf {
                continue;
            }
            let v = self.value(idx[pos], feature);
            if v == self.value(idx[pos + 1], feature) {
                continue;
            }
            let score = sq_left / nl as f64 + sq_right / nr as f64;
            if best.as_ref().map_or(true, |b| score > b.score) {
                best = Some(Candidate {
                    score,
                    feature,
                    threshold: v,
                    left_len: nl,
                });
            }
        }
        best
    }
}

impl Forest {
    /// Mean of the leaf class fractions reached in every tree, `n×L`.
    pub fn predict_proba(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        let (n, f) = rows(x)?;
        if f != self.num_features {
            bail!(Input, "forest expects {} features, got {f}", self.num_features);
        }
        let l = self.num_classes;
        let scale = 1.0 / self.trees.len() as f64;
        let out: Vec<f64> = x
            .data()
            .par_chunks(f)
            .flat_map_iter(|row| {
                let mut p = vec![0.0; l];
                for t in &self.trees {
                    p.iter_mut().zip(t.leaf_for(row)).for_each(|(a, b)| *a += b);
                }
                p.into_iter().map(move |v| v * scale)
            })
            .collect();
        Tensor::new(&[n, l], out)
    }

    /// Argmax of [`predict_proba`](Self::predict_proba); ties go to the
    /// lowest class.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<u32>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.batch()).map(|i| argmax(p.row(i)) as u32 + 1).collect())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.num_classes, self.num_features, self.trees.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for t in &self.trees {
            w.write_all(&(t.nodes.len() as u64).to_le_bytes())?;
            for node in &t.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.write_all(&[0])?;
                        w.write_all(&(*feature as u64).to_le_bytes())?;
                        w.write_all(&threshold.to_le_bytes())?;
                        w.write_all(&(*left as u64).to_le_bytes())?;
                        w.write_all(&(*right as u64).to_le_bytes())?;
                    }
                    Node::Leaf(h) => {
                        w.write_all(&[1])?;
                        for v in h {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 5];
        get(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "bad forest magic");
        }
        let classes = get_usize(&mut r)?;
        let features = get_usize(&mut r)?;
        let n_trees = get_usize(&mut r)?;
        if classes == 0 || features == 0 || n_trees == 0 || classes > 1 << 16 {
            bail!(Format, "implausible forest header");
        }
        let mut trees = Vec::new();
        for _ in 0..n_trees {
            let count = get_usize(&mut r)?;
            let mut nodes = Vec::new();
            for _ in 0..count {
                let mut tag = [0u8; 1];
                get(&mut r, &mut tag)?;
                nodes.push(match tag[0] {
                    0 => {
                        let feature = get_usize(&mut r)?;
                        let mut b = [0u8; 4];
                        get(&mut r, &mut b)?;
                        let left = get_usize(&mut r)?;
                        let right = get_usize(&mut r)?;
                        if feature >= features || left >= count || right >= count {
                            bail!(Format, "forest node refers outside its tree");
                        }
                        Node::Split {
                            feature,
                            threshold: f32::from_le_bytes(b),
                            left,
                            right,
                        }
                    }
                    1 => {
                        let mut h = Vec::with_capacity(classes);
                        for _ in 0..classes {
                            let mut b = [0u8; 8];
                            get(&mut r, &mut b)?;
                            h.push(f64::from_le_bytes(b));
                        }
                        Node::Leaf(h)
                    }
                    t => bail!(Format, "bad forest node tag {t}"),
                });
            }
            if nodes.is_empty() {
                bail!(Format, "empty tree");
            }
            trees.push(DecisionTree { nodes });
        }
        let forest = Self {
            num_classes: classes,
            num_features: features,
            trees,
        };
        forest.check_acyclic()?;
        Ok(forest)
    }

    /// Children must come after their parent, which rules out cycles.
    fn check_acyclic(&self) -> Result<()> {
        for t in &self.trees {
            for (i, node) in t.nodes.iter().enumerate() {
                if let Node::Split { left, right, .. } = node {
                    if *left <= i || *right <= i {
                        bail!(Format, "forest node {i} points backwards");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn get<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated forest".into()),
        _ => Error::Io(e),
    })
}

fn get_usize<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    get(r, &mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("forest index overflow".into()))
}
