//! Synthetic multi-resolution scenes.
//!
//! Class `k` (1-based) is the pair (spectral group `(k−1)/2`, texture
//! `(k−1)%2`). Spectral groups differ only in the MS signal and textures
//! only in the PAN signal, so consecutive classes are spectral twins and
//! classes two apart are texture twins. Telling every class apart needs
//! both sources.
//!
//! The MS image is the `r×r` block average of a full-resolution spectral
//! field; the PAN image is a flat grey level carrying an oriented sinusoid
//! whose period depends on the texture. The optional fused image adds the
//! PAN detail to the spectral field, standing in for a pansharpened scene.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::raster::LabelGrid;
use crate::data::scene::RasterPair;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub objects_per_class: usize,
    pub scene_size: usize,
    pub ratio: usize,
    pub bands: usize,
    pub seed: u64,
    pub with_fused: bool,
    /// Per-pixel noise standard deviation, in reflectance units.
    pub pixel_noise: f64,
    /// Per-object offset of the spectral signature.
    pub object_jitter: f64,
    /// Sinusoid amplitude in the PAN image.
    pub texture_amplitude: f64,
    /// Sinusoid periods in PAN pixels, one per texture.
    pub texture_periods: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            objects_per_class: 20,
            scene_size: 512,
            ratio: 4,
            bands: 4,
            seed: 0,
            with_fused: true,
            pixel_noise: 0.03,
            object_jitter: 0.02,
            texture_amplitude: 0.15,
            texture_periods: [3.5, 9.0],
        }
    }
}

/// Digital numbers are reflectance times this scale.
const DN_SCALE: f64 = 1000.0;
const BACKGROUND_GREY: f64 = 0.5;
const MIN_SIGNATURE_DISTANCE: f64 = 0.15;

pub fn spectral_group(class: u32) -> usize {
    (class as usize - 1) / 2
}

pub fn texture(class: u32) -> usize {
    (class as usize - 1) % 2
}

/// Mean band vectors, one per spectral group, plus the background.
fn signatures(groups: usize, bands: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(groups + 1);
    let mut attempts = 0;
    while out.len() < groups + 1 {
        let cand: Vec<f64> = (0..bands).map(|_| rng.random_range(0.15..0.85)).collect();
        attempts += 1;
        let far = out.iter().all(|s| {
            s.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_SIGNATURE_DISTANCE
        });
        // Separation is best-effort when many groups share few bands.
        if far || attempts > 10_000 {
            out.push(cand);
        }
    }
    out
}

struct Object {
    id: u32,
    class: u32,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    signature: Vec<f64>,
    theta: f64,
    phase: f64,
}

fn check(cfg: &SynthConfig) -> Result<()> {
    let SynthConfig {
        num_classes: l,
        objects_per_class: per,
        scene_size: size,
        ratio: r,
        bands: c,
        ..
    } = *cfg;
    if l < 1 || per < 1 || c < 1 || r < 1 {
        bail!(Config, "classes, objects, bands and ratio must all be at least 1");
    }
    if size % r != 0 {
        bail!(Config, "scene size {size} is not divisible by the ratio {r}");
    }
    Ok(())
}

/// Generator state after the class signatures have been drawn; both entry
/// points draw them identically, so a seed fixes the class appearance.
fn start(cfg: &SynthConfig) -> (ChaCha8Rng, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigs = signatures(cfg.num_classes.div_ceil(2), cfg.bands, &mut rng);
    (rng, sigs)
}

fn object(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    sigs: &[Vec<f64>],
    id: u32,
    class: u32,
    rect: (usize, usize, usize, usize),
) -> Object {
    let jitter = Normal::new(0.0, cfg.object_jitter.max(0.0)).unwrap();
    let signature = sigs[spectral_group(class)]
        .iter()
        .map(|m| m + jitter.sample(rng))
        .collect();
    let (y0, x0, h, w) = rect;
    Object {
        id,
        class,
        y0,
        x0,
        h,
        w,
        signature,
        theta: rng.random_range(0.0..PI),
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Objects on a jittered grid, classes in random cells.
pub fn synth_generate(cfg: &SynthConfig) -> Result<RasterPair> {
    check(cfg)?;
    let n = cfg.num_classes * cfg.objects_per_class;
    let size = cfg.scene_size;
    let cells = (n as f64).sqrt().ceil() as usize;
    let cell = size / cells;
    if cell < 4 {
        bail!(Config, "{n} objects do not fit in a {size}×{size} scene");
    }
    let (mut rng, sigs) = start(cfg);
    let mut slots: Vec<usize> = (0..cells * cells).collect();
    slots.shuffle(&mut rng);
    let mut objects = Vec::with_capacity(n);
    for (i, &slot) in slots.iter().take(n).enumerate() {
        let class = (i / cfg.objects_per_class) as u32 + 1;
        let h = ((cell as f64 * rng.random_range(0.6..0.9)) as usize).max(1);
        let w = ((cell as f64 * rng.random_range(0.6..0.9)) as usize).max(1);
        let y0 = (slot / cells) * cell + rng.random_range(0..=cell - h);
        let x0 = (slot % cells) * cell + rng.random_range(0..=cell - w);
        objects.push(object(cfg, &mut rng, &sigs, i as u32 + 1, class, (y0, x0, h, w)));
    }
    render(cfg, &sigs, &objects, &mut rng)
}

/// A scene entirely covered by one object of `class`, with the same class
/// appearance as [`synth_generate`] under the same configuration.
pub fn synth_uniform(cfg: &SynthConfig, class: u32) -> Result<RasterPair> {
    check(cfg)?;
    if class == 0 || class as usize > cfg.num_classes {
        bail!(Label, "class {class} outside 1..={}", cfg.num_classes);
    }
    let (mut rng, sigs) = start(cfg);
    let size = cfg.scene_size;
    let o = object(cfg, &mut rng, &sigs, 1, class, (0, 0, size, size));
    render(cfg, &sigs, &[o], &mut rng)
}

fn render(cfg: &SynthConfig, sigs: &[Vec<f64>], objects: &[Object], rng: &mut ChaCha8Rng) -> Result<RasterPair> {
    let (size, r, c) = (cfg.scene_size, cfg.ratio, cfg.bands);
    let background = &sigs[sigs.len() - 1];
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).unwrap();
    let mut labels = LabelGrid::new(size, size);
    let mut ids = LabelGrid::new(size, size);
    for o in objects {
        for y in o.y0..o.y0 + o.h {
            for x in o.x0..o.x0 + o.w {
                labels.set(y, x, o.class);
                ids.set(y, x, o.id);
            }
        }
    }

    // Full-resolution spectral field and PAN image.
    let mut spectral = vec![0.0f64; size * size * c];
    let mut pan = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let id = ids.get(y, x);
            let px = y * size + x;
            let (sig, detail) = if id == 0 {
                (background, 0.0)
            } else {
                let o = &objects[id as usize - 1];
                let period = cfg.texture_periods[texture(o.class)];
                let u = x as f64 * o.theta.cos() + y as f64 * o.theta.sin();
                (&o.signature, cfg.texture_amplitude * (2.0 * PI * u / period + o.phase).sin())
            };
            for b in 0..c {
                spectral[px * c + b] = sig[b] + noise.sample(rng);
            }
            pan[px] = BACKGROUND_GREY + detail + noise.sample(rng);
        }
    }

    let m = size / r;
    let mut ms = vec![0.0f32; m * m * c];
    let area = (r * r) as f64;
    for my in 0..m {
        for mx in 0..m {
            for b in 0..c {
                let mut acc = 0.0;
                for y in my * r..(my + 1) * r {
                    for x in mx * r..(mx + 1) * r {
                        acc += spectral[(y * size + x) * c + b];
                    }
                }
                ms[(my * m + mx) * c + b] = (acc / area * DN_SCALE) as f32;
            }
        }
    }
    let fused = cfg.with_fused.then(|| {
        let data = spectral
            .iter()
            .enumerate()
            .map(|(i, &s)| ((s + 0.5 * (pan[i / c] - BACKGROUND_GREY)) * DN_SCALE) as f32)
            .collect();
        Tensor::new(&[size, size, c], data)
    });
    let pan = Tensor::new(&[size, size, 1], pan.iter().map(|&v| (v * DN_SCALE) as f32).collect())?;
    let ms = Tensor::new(&[m, m, c], ms)?;
    RasterPair::new(pan, ms, fused.transpose()?, r, labels, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 4,
            objects_per_class: 5,
            scene_size: 128,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn produces_valid_scene_with_every_object() {
        let rp = synth_generate(&small()).unwrap();
        rp.validate().unwrap();
        let mut ids: Vec<u32> = rp.objects.data.iter().copied().filter(|&v| v > 0).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, (1..=20).collect::<Vec<_>>());
        assert_eq!(rp.ms.shape(), &[32, 32, 4]);
        assert_eq!(rp.fused.as_ref().unwrap().shape(), &[128, 128, 4]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_generate(&small()).unwrap(), synth_generate(&small()).unwrap());
    }

    #[test]
    fn class_structure() {
        assert_eq!((spectral_group(1), texture(1)), (0, 0));
        assert_eq!((spectral_group(2), texture(2)), (0, 1));
        assert_eq!((spectral_group(3), texture(3)), (1, 0));
    }

    #[test]
    fn uniform_scene_is_one_object() {
        let rp = synth_uniform(&small(), 3).unwrap();
        assert!(rp.labels.data.iter().all(|&v| v == 3));
        assert!(rp.objects.data.iter().all(|&v| v == 1));
    }

    #[test]
    fn rejects_indivisible_scene() {
        let cfg = SynthConfig {
            scene_size: 130,
            ..small()
        };
        assert!(synth_generate(&cfg).is_err());
    }
}
