//! Object-disjoint, class-stratified train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::patch::PatchPair;
use crate::error::{bail, Error, Result};

pub const DEFAULT_TRAIN_RATIO: f64 = 0.30;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub ratio: f64,
    pub train_objects: BTreeSet<u32>,
    pub test_objects: BTreeSet<u32>,
}

/// Number of training objects for a class of `n` objects: the rounded
/// share, kept away from 0 and `n` so both sides see every class.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Splits the objects referenced by `samples`.
pub fn object_split(samples: &[PatchPair], ratio: f64, seed: u64) -> Result<SplitPlan> {
    let mut objects = BTreeMap::new();
    for s in samples {
        if s.object_id == 0 {
            bail!(Split, "sample at ({}, {}) has no object id", s.anchor.x, s.anchor.y);
        }
        if let Some(prev) = objects.insert(s.object_id, s.label) {
            if prev != s.label {
                bail!(Label, "object {} carries labels {prev} and {}", s.object_id, s.label);
            }
        }
    }
    split_objects(&objects, ratio, seed)
}

/// Splits an object → class map. Each class is shuffled independently with
/// a generator derived from `seed`, so the plan does not depend on which
/// other classes are present.
pub fn split_objects(object_labels: &BTreeMap<u32, u32>, ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "split ratio must lie in (0, 1), got {ratio}");
    }
    let mut by_class: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&obj, &label) in object_labels {
        by_class.entry(label).or_default().push(obj);
    }
    let mut plan = SplitPlan {
        seed,
        ratio,
        train_objects: BTreeSet::new(),
        test_objects: BTreeSet::new(),
    };
    for (class, mut objs) in by_class {
        if objs.len() < 2 {
            bail!(Split, "class {class} has {} object(s); at least 2 are needed", objs.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        objs.shuffle(&mut rng);
        let k = train_count(objs.len(), ratio);
        plan.train_objects.extend(&objs[..k]);
        plan.test_objects.extend(&objs[k..]);
    }
    Ok(plan)
}

impl SplitPlan {
    /// `(train, test)` samples; samples of objects outside the plan are
    /// dropped.
    pub fn partition<'a>(&self, samples: &'a [PatchPair]) -> (Vec<&'a PatchPair>, Vec<&'a PatchPair>) {
        let train = samples
            .iter()
            .filter(|s| self.train_objects.contains(&s.object_id))
            .collect();
        let test = samples
            .iter()
            .filter(|s| self.test_objects.contains(&s.object_id))
            .collect();
        (train, test)
    }

    pub fn side(&self, side: Side) -> &BTreeSet<u32> {
        match side {
            Side::Train => &self.train_objects,
            Side::Test => &self.test_objects,
        }
    }

    pub fn to_text(&self) -> String {
        let join = |s: &BTreeSet<u32>| s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "ratio={}", self.ratio).unwrap();
        writeln!(out, "train={}", join(&self.train_objects)).unwrap();
        writeln!(out, "test={}", join(&self.test_objects)).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::model::parse_kv(text)?;
        let field = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("split file lacks '{k}'")));
        let ids = |k: &str| -> Result<BTreeSet<u32>> {
            field(k)?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad object id '{v}'"))))
                .collect()
        };
        let plan = Self {
            seed: field("seed")?
                .parse()
                .map_err(|_| Error::Format("bad split seed".into()))?,
            ratio: field("ratio")?
                .parse()
                .map_err(|_| Error::Format("bad split ratio".into()))?,
            train_objects: ids("train")?,
            test_objects: ids("test")?,
        };
        if let Some(o) = plan.train_objects.intersection(&plan.test_objects).next() {
            bail!(Split, "object {o} is on both sides of the split");
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Train,
    Test,
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Side::Train),
            "test" => Ok(Side::Test),
            other => bail!(Config, "split side must be 'train' or 'test', got '{other}'"),
        }
    }
}
