//! Confusion matrices and the scores derived from them.

use std::fmt::Write as _;

use crate::error::{bail, Result};

/// `counts[t][p]`: samples of true class `t + 1` predicted as `p + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![0; classes * classes],
            classes,
        }
    }

    /// From row-major counts, rows being true classes.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let l = rows.len();
        if l == 0 || rows.iter().any(|r| r.len() != l) {
            bail!(Input, "confusion matrix must be square and non-empty");
        }
        Ok(Self {
            counts: rows.concat(),
            classes: l,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Records one sample; labels are 1-based.
    pub fn add(&mut self, truth: u32, pred: u32) -> Result<()> {
        let l = self.classes as u32;
        for v in [truth, pred] {
            if v == 0 || v > l {
                bail!(Input, "label {v} outside 1..={l}");
            }
        }
        self.counts[(truth as usize - 1) * self.classes + pred as usize - 1] += 1;
        Ok(())
    }

    /// Sums shards of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            bail!(Input, "cannot merge {}-class and {}-class matrices", self.classes, other.classes);
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|t| (0..self.classes).all(|p| t == p || self.get(t, p) == 0))
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => bail!(Input, "confusion matrix is empty"),
            n => Ok(n as f64),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth");
        for p in 1..=self.classes {
            write!(s, ",pred{p}").unwrap();
        }
        s.push('\n');
        for t in 0..self.classes {
            write!(s, "{}", t + 1).unwrap();
            for p in 0..self.classes {
                write!(s, ",{}", self.get(t, p)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(truth: &[u32], pred: &[u32], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        bail!(Input, "{} true labels but {} predictions", truth.len(), pred.len());
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty()?)
}

/// Cohen's kappa. When chance agreement is already 1 the score is 0.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let po = cm.trace() as f64 / n;
    let pe: f64 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&r, c)| (r as f64 / n) * (c as f64 / n))
        .sum();
    if pe >= 1.0 {
        return Ok(0.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FMeasure {
    pub per_class: Vec<f64>,
    /// Mean weighted by true-class support.
    pub weighted: f64,
    pub macro_mean: f64,
}

/// Per-class F1. A class with neither predictions nor true samples, or
/// with zero true positives, scores 0.
pub fn f_measure(cm: &ConfusionMatrix) -> Result<FMeasure> {
    let n = cm.nonempty()?;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<f64> = (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let denom = (rows[k] + cols[k]) as f64;
            // Harmonic mean of precision and recall, 2tp / (support + predicted).
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .collect();
    let weighted = per_class.iter().zip(&rows).map(|(f, &r)| f * r as f64).sum::<f64>() / n;
    let macro_mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(FMeasure {
        per_class,
        weighted,
        macro_mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub kappa: f64,
    pub f: FMeasure,
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    Ok(Scores {
        accuracy: accuracy(cm)?,
        kappa: kappa(cm)?,
        f: f_measure(cm)?,
    })
}

impl Scores {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "accuracy,{}", self.accuracy).unwrap();
        writeln!(s, "kappa,{}", self.kappa).unwrap();
        writeln!(s, "fmeasure_weighted,{}", self.f.weighted).unwrap();
        writeln!(s, "fmeasure_macro,{}", self.f.macro_mean).unwrap();
        for (k, f) in self.f.per_class.iter().enumerate() {
            writeln!(s, "f_class{},{f}", k + 1).unwrap();
        }
        s
    }
}
