//! Paired geometric augmentation.
//!
//! Every transform is a symmetry of the square, applied identically to the
//! PAN patch, the MS patch and (when present) the full-resolution patch.
//! Because the PAN side is exactly `r` times the MS side, an MS block
//! `(y/r, x/r)` moves to the block containing the transformed PAN pixel.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::patch::PatchPair;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Elements of the dihedral group of the square. `AntiTranspose` is never
/// drawn for augmentation; it exists so that composition is closed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
    Transpose,
    AntiTranspose,
}

/// The transforms drawn by [`build_training_set`].
pub const AUGMENTATIONS: [Transform; 6] = [
    Transform::Rot90,
    Transform::Rot180,
    Transform::Rot270,
    Transform::HFlip,
    Transform::VFlip,
    Transform::Transpose,
];

pub const ALL: [Transform; 8] = [
    Transform::Identity,
    Transform::Rot90,
    Transform::Rot180,
    Transform::Rot270,
    Transform::HFlip,
    Transform::VFlip,
    Transform::Transpose,
    Transform::AntiTranspose,
];

impl Transform {
    /// `(swap, flip_row, flip_col)`: optionally swap the axes, then
    /// mirror the row and/or column coordinate.
    fn parts(self) -> (bool, bool, bool) {
        match self {
            Transform::Identity => (false, false, false),
            // Counter-clockwise quarter turn.
            Transform::Rot90 => (true, true, false),
            Transform::Rot180 => (false, true, true),
            Transform::Rot270 => (true, false, true),
            Transform::HFlip => (false, false, true),
            Transform::VFlip => (false, true, false),
            Transform::Transpose => (true, false, false),
            Transform::AntiTranspose => (true, true, true),
        }
    }

    fn from_parts(p: (bool, bool, bool)) -> Self {
        *ALL.iter().find(|t| t.parts() == p).unwrap()
    }

    /// Where input pixel `(y, x)` of an `n×n` grid ends up.
    pub fn map(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (swap, fr, fc) = self.parts();
        let (a, b) = if swap { (x, y) } else { (y, x) };
        (if fr { n - 1 - a } else { a }, if fc { n - 1 - b } else { b })
    }

    /// `self` followed by `next`.
    pub fn then(self, next: Transform) -> Transform {
        let (s1, r1, c1) = self.parts();
        let (s2, r2, c2) = next.parts();
        // Swapping after a mirror moves the mirror to the other axis.
        let (r1, c1) = if s2 { (c1, r1) } else { (r1, c1) };
        Transform::from_parts((s1 ^ s2, r1 ^ r2, c1 ^ c2))
    }

    pub fn inverse(self) -> Transform {
        *ALL.iter().find(|t| self.then(**t) == Transform::Identity).unwrap()
    }

    /// Applies the transform to a square `n×n×c` tensor.
    pub fn apply(self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let &[h, w, c] = t.shape() else {
            bail!(Dimension, "augmentation expects n×n×c, got {:?}", t.shape());
        };
        if h != w {
            bail!(Dimension, "augmentation needs square patches, got {h}×{w}");
        }
        let mut out = vec![0.0; t.len()];
        let src = t.data();
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = self.map(y, x, h);
                let d = (oy * w + ox) * c;
                let s = (y * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        Tensor::new(t.shape(), out)
    }
}

pub fn augment(pp: &PatchPair, t: Transform) -> Result<PatchPair> {
    Ok(PatchPair {
        pan: t.apply(&pp.pan)?,
        ms: t.apply(&pp.ms)?,
        fused: pp.fused.as_ref().map(|f| t.apply(f)).transpose()?,
        ..pp.clone()
    })
}

/// Each sample followed by two copies under distinct transforms drawn
/// uniformly from [`AUGMENTATIONS`]; the result is exactly three times
/// the input.
pub fn build_training_set(samples: &[PatchPair], seed: u64) -> Result<Vec<PatchPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples.len() * 3);
    for s in samples {
        out.push(s.clone());
        for i in index::sample(&mut rng, AUGMENTATIONS.len(), 2) {
            out.push(augment(s, AUGMENTATIONS[i])?);
        }
    }
    Ok(out)
}
