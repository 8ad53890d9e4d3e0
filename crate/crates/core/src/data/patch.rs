//! Ratio-aligned PAN/MS patch pairs.
//!
//! A pair covers the same ground footprint in both images: a `d×d` PAN
//! window with origin `(x − d/2, y − d/2)` and a `(d/r)×(d/r)` MS window
//! whose origin is the PAN origin divided by `r`. Training anchors are
//! restricted to the lattice on which that division is exact.

use std::collections::BTreeMap;

use crate::data::scene::{crop, crop_clamped, RasterPair};
use crate::error::{bail, Result};
use crate::model::InputSource;
use crate::tensor::Tensor;

/// PAN pixel carrying a sample's label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Anchor {
    pub y: usize,
    pub x: usize,
}

impl Anchor {
    pub fn new(x: usize, y: usize) -> Self {
        Self { y, x }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    /// `d×d×1`.
    pub pan: Tensor<f32>,
    /// `(d/r)×(d/r)×c`.
    pub ms: Tensor<f32>,
    /// `d×d×c`, when the scene carries a full-resolution multi-band image.
    pub fused: Option<Tensor<f32>>,
    pub label: u32,
    pub object_id: u32,
    pub anchor: Anchor,
}

impl PatchPair {
    pub fn source(&self, s: InputSource) -> Result<&Tensor<f32>> {
        match s {
            InputSource::Pan => Ok(&self.pan),
            InputSource::Ms => Ok(&self.ms),
            InputSource::Fused => match &self.fused {
                Some(f) => Ok(f),
                None => bail!(Input, "sample has no full-resolution multi-band patch"),
            },
        }
    }
}

/// PAN and MS window origins `(y, x)` for an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub pan_origin: (usize, usize),
    pub ms_origin: (usize, usize),
}

fn check_patch_size(d: usize, r: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 || d % r != 0 {
        bail!(Config, "patch size {d} must be even and divisible by the ratio {r}");
    }
    Ok(())
}

/// Validates an anchor and resolves its windows.
pub fn windows(rp: &RasterPair, anchor: Anchor, d: usize) -> Result<Windows> {
    let r = rp.ratio;
    check_patch_size(d, r)?;
    let (h, w) = rp.pan_size();
    let half = d / 2;
    if anchor.x < half || anchor.y < half || anchor.x + half > w || anchor.y + half > h {
        bail!(
            Bounds,
            "a {d}×{d} window at ({}, {}) leaves the {h}×{w} scene",
            anchor.x,
            anchor.y
        );
    }
    let (oy, ox) = (anchor.y - half, anchor.x - half);
    if ox % r != 0 || oy % r != 0 {
        bail!(
            Alignment,
            "anchor ({}, {}) puts the PAN origin off the ratio-{r} lattice",
            anchor.x,
            anchor.y
        );
    }
    Ok(Windows {
        pan_origin: (oy, ox),
        ms_origin: (oy / r, ox / r),
    })
}

pub fn extract_patch_pair(rp: &RasterPair, anchor: Anchor, d: usize) -> Result<PatchPair> {
    let win = windows(rp, anchor, d)?;
    let label = rp.labels.get(anchor.y, anchor.x);
    if label == 0 {
        bail!(Label, "anchor ({}, {}) is unlabeled", anchor.x, anchor.y);
    }
    let object_id = rp.objects.get(anchor.y, anchor.x);
    let (py, px) = win.pan_origin;
    let (my, mx) = win.ms_origin;
    let dm = d / rp.ratio;
    Ok(PatchPair {
        pan: crop(&rp.pan, py, px, d, d)?,
        ms: crop(&rp.ms, my, mx, dm, dm)?,
        fused: rp.fused.as_ref().map(|f| crop(f, py, px, d, d)).transpose()?,
        label,
        object_id,
        anchor,
    })
}

/// Map-time extraction for any anchor: edge-clamped windows, and the MS
/// origin is `floor(pan_origin / r)` so off-lattice anchors shift by at
/// most `r − 1` PAN pixels. Returns the inputs in `sources` order.
pub fn extract_clamped(
    rp: &RasterPair,
    anchor: Anchor,
    d: usize,
    sources: &[InputSource],
) -> Result<Vec<Tensor<f32>>> {
    let r = rp.ratio as isize;
    let half = (d / 2) as isize;
    let py = anchor.y as isize - half;
    let px = anchor.x as isize - half;
    let dm = d / rp.ratio;
    sources
        .iter()
        .map(|s| match s {
            InputSource::Pan => crop_clamped(&rp.pan, py, px, d, d),
            InputSource::Ms => crop_clamped(&rp.ms, py.div_euclid(r), px.div_euclid(r), dm, dm),
            InputSource::Fused => match &rp.fused {
                Some(f) => crop_clamped(f, py, px, d, d),
                None => bail!(Input, "scene has no full-resolution multi-band image"),
            },
        })
        .collect()
}

/// Labeled anchors on the aligned lattice whose windows fit in the scene,
/// in row-major order. With `max_per_object`, each object keeps that many
/// anchors spread evenly over its own row-major list.
pub fn enumerate_anchors(rp: &RasterPair, d: usize, max_per_object: Option<usize>) -> Result<Vec<Anchor>> {
    let r = rp.ratio;
    check_patch_size(d, r)?;
    let (h, w) = rp.pan_size();
    let half = d / 2;
    let mut all = Vec::new();
    if h >= d && w >= d {
        for y in (half..=h - half).step_by(r) {
            for x in (half..=w - half).step_by(r) {
                if rp.labels.get(y, x) > 0 {
                    all.push(Anchor::new(x, y));
                }
            }
        }
    }
    let Some(cap) = max_per_object else {
        return Ok(all);
    };
    let mut by_object: BTreeMap<u32, Vec<Anchor>> = BTreeMap::new();
    for a in all {
        by_object.entry(rp.objects.get(a.y, a.x)).or_default().push(a);
    }
    let mut kept: Vec<Anchor> = by_object
        .values()
        .flat_map(|list| {
            let n = list.len();
            let take = cap.min(n);
            (0..take).map(move |i| list[i * n / take])
        })
        .collect();
    kept.sort();
    Ok(kept)
}

pub fn enumerate_samples(rp: &RasterPair, d: usize, max_per_object: Option<usize>) -> Result<Vec<PatchPair>> {
    enumerate_anchors(rp, d, max_per_object)?
        .into_iter()
        .map(|a| extract_patch_pair(rp, a, d))
        .collect()
}
