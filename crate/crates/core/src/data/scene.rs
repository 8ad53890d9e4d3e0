use std::collections::HashMap;

use log::warn;

use crate::data::raster::LabelGrid;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandStats {
    pub min: f32,
    pub max: f32,
}

/// Statistics each image was normalized with, kept for inverse mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStats {
    pub pan: Vec<BandStats>,
    pub ms: Vec<BandStats>,
    pub fused: Option<Vec<BandStats>>,
}

/// Co-registered PAN and MS scenes with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterPair {
    /// `Hp×Wp×1`.
    pub pan: Tensor<f32>,
    /// `(Hp/r)×(Wp/r)×c`.
    pub ms: Tensor<f32>,
    /// Optional full-resolution multi-band image (`Hp×Wp×c`).
    pub fused: Option<Tensor<f32>>,
    pub ratio: usize,
    /// Class per PAN pixel, 0 = unlabeled.
    pub labels: LabelGrid,
    /// Object per PAN pixel, 0 = no object.
    pub objects: LabelGrid,
    /// Set once the images have been normalized.
    pub band_stats: Option<SceneStats>,
}

impl RasterPair {
    /// Checks the geometric and ground-truth invariants.
    pub fn new(
        pan: Tensor<f32>,
        ms: Tensor<f32>,
        fused: Option<Tensor<f32>>,
        ratio: usize,
        labels: LabelGrid,
        objects: LabelGrid,
    ) -> Result<Self> {
        let rp = Self {
            pan,
            ms,
            fused,
            ratio,
            labels,
            objects,
            band_stats: None,
        };
        rp.validate()?;
        Ok(rp)
    }

    pub fn pan_size(&self) -> (usize, usize) {
        (self.pan.shape()[0], self.pan.shape()[1])
    }

    pub fn bands(&self) -> usize {
        self.ms.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ratio;
        if r == 0 {
            bail!(Config, "resolution ratio must be at least 1");
        }
        let &[hp, wp, pc] = self.pan.shape() else {
            bail!(Dimension, "PAN must be H×W×1, got {:?}", self.pan.shape());
        };
        if pc != 1 {
            bail!(Dimension, "PAN must have one band, has {pc}");
        }
        if hp % r != 0 || wp % r != 0 {
            bail!(Dimension, "PAN extent {hp}×{wp} not divisible by ratio {r}");
        }
        let &[hm, wm, c] = self.ms.shape() else {
            bail!(Dimension, "MS must be H×W×C, got {:?}", self.ms.shape());
        };
        if hm * r != hp || wm * r != wp {
            bail!(Dimension, "MS extent {hm}×{wm} does not match PAN {hp}×{wp} at ratio {r}");
        }
        if let Some(f) = &self.fused {
            if f.shape() != [hp, wp, c] {
                bail!(Dimension, "fused image must be {hp}×{wp}×{c}, got {:?}", f.shape());
            }
        }
        for (name, g) in [("labels", &self.labels), ("objects", &self.objects)] {
            if g.height != hp || g.width != wp {
                bail!(Dimension, "{name} raster must be {hp}×{wp}");
            }
        }
        let mut object_label: HashMap<u32, u32> = HashMap::new();
        for (i, (&lab, &obj)) in self.labels.data.iter().zip(&self.objects.data).enumerate() {
            if lab > 0 && obj == 0 {
                bail!(Label, "labeled pixel {} has no object id", i);
            }
            if obj > 0 {
                let seen = *object_label.entry(obj).or_insert(lab);
                if seen != lab {
                    bail!(Label, "object {obj} mixes labels {seen} and {lab}");
                }
            }
        }
        Ok(())
    }

    /// Maps every band of every image to `[0, 1]` using whole-scene
    /// minima and maxima. Constant bands become zeros and are logged.
    pub fn normalized(&self) -> Result<Self> {
        let stats = SceneStats {
            pan: band_stats(&self.pan)?,
            ms: band_stats(&self.ms)?,
            fused: self.fused.as_ref().map(band_stats).transpose()?,
        };
        self.normalized_with(&stats)
    }

    /// Normalizes with statistics taken from another scene, e.g. the one a
    /// model was trained on. Values may then fall outside `[0, 1]`.
    pub fn normalized_with(&self, stats: &SceneStats) -> Result<Self> {
        let mut out = self.clone();
        out.pan = normalize(&self.pan, &stats.pan)?.0;
        out.ms = normalize(&self.ms, &stats.ms)?.0;
        out.fused = match (&self.fused, &stats.fused) {
            (Some(f), Some(s)) => Some(normalize(f, s)?.0),
            (None, _) => None,
            (Some(_), None) => bail!(Input, "no statistics for the full-resolution image"),
        };
        out.band_stats = Some(stats.clone());
        Ok(out)
    }
}

/// Per-band minimum and maximum of an `H×W×C` raster.
pub fn band_stats(t: &Tensor<f32>) -> Result<Vec<BandStats>> {
    let c = *t.shape().last().unwrap();
    let mut s = vec![
        BandStats {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        };
        c
    ];
    for px in t.data().chunks_exact(c) {
        for (b, &v) in s.iter_mut().zip(px) {
            if !v.is_finite() {
                bail!(Numeric, "raster contains a non-finite value");
            }
            b.min = b.min.min(v);
            b.max = b.max.max(v);
        }
    }
    Ok(s)
}

/// Affinely maps each band to `[0, 1]` with the given statistics. Returns
/// the normalized raster and, per band, whether it was constant (and hence
/// mapped to zeros).
pub fn normalize(t: &Tensor<f32>, stats: &[BandStats]) -> Result<(Tensor<f32>, Vec<bool>)> {
    let c = *t.shape().last().unwrap();
    if stats.len() != c {
        bail!(Dimension, "{} band statistics for {c} bands", stats.len());
    }
    let constant: Vec<bool> = stats.iter().map(|s| s.max <= s.min).collect();
    for (b, &flat) in constant.iter().enumerate() {
        if flat {
            warn!("band {b} is constant; mapping it to zeros");
        }
    }
    let mut out = t.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, s), &flat) in px.iter_mut().zip(stats).zip(&constant) {
            *v = if flat {
                0.0
            } else {
                ((*v as f64 - s.min as f64) / (s.max as f64 - s.min as f64)) as f32
            };
        }
    }
    Ok((out, constant))
}

/// Copies the `h×w` window at `(y0, x0)`; the window must lie inside `t`.
pub fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let &[th, tw, c] = t.shape() else {
        bail!(Dimension, "crop expects H×W×C, got {:?}", t.shape());
    };
    if y0 + h > th || x0 + w > tw {
        bail!(Bounds, "window {h}×{w} at ({x0}, {y0}) exceeds {th}×{tw}");
    }
    let mut data = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let start = (y * tw + x0) * c;
        data.extend_from_slice(&t.data()[start..start + w * c]);
    }
    Tensor::new(&[h, w, c], data)
}

/// Like [`crop`], but coordinates outside `t` replicate the nearest edge.
pub fn crop_clamped(t: &Tensor<f32>, y0: isize, x0: isize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let &[th, tw, c] = t.shape() else {
        bail!(Dimension, "crop expects H×W×C, got {:?}", t.shape());
    };
    let mut data = Vec::with_capacity(h * w * c);
    for dy in 0..h {
        let y = (y0 + dy as isize).clamp(0, th as isize - 1) as usize;
        for dx in 0..w {
            let x = (x0 + dx as isize).clamp(0, tw as isize - 1) as usize;
            let start = (y * tw + x) * c;
            data.extend_from_slice(&t.data()[start..start + c]);
        }
    }
    Tensor::new(&[h, w, c], data)
}
