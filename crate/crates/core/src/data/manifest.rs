//! Dataset manifest: a `key=value` text file naming the rasters of one
//! scene. Relative paths resolve against the manifest's directory.
//!
//! ```text
//! pan=pan.rast
//! ms=ms.rast
//! labels=labels.rast
//! objects=objects.rast
//! fused=fused.rast        # optional
//! ratio=4
//! bands=4
//! classes=crops,forest,urban
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::raster::{read_labels, read_tensor, write_labels, write_tensor};
use crate::data::scene::RasterPair;
use crate::error::{bail, Error, Result};
use crate::model::parse_kv;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene: RasterPair,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("class{k}")).collect()
}

/// Writes the scene rasters and a `manifest.txt` into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let rp = &ds.scene;
    write_tensor(&dir.join("pan.rast"), &rp.pan)?;
    write_tensor(&dir.join("ms.rast"), &rp.ms)?;
    write_labels(&dir.join("labels.rast"), &rp.labels)?;
    write_labels(&dir.join("objects.rast"), &rp.objects)?;
    let mut text = String::from("pan=pan.rast\nms=ms.rast\nlabels=labels.rast\nobjects=objects.rast\n");
    if let Some(f) = &rp.fused {
        write_tensor(&dir.join("fused.rast"), f)?;
        text.push_str("fused=fused.rast\n");
    }
    writeln!(text, "ratio={}", rp.ratio).unwrap();
    writeln!(text, "bands={}", rp.bands()).unwrap();
    writeln!(text, "classes={}", ds.class_names.join(",")).unwrap();
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let kv = parse_kv(&std::fs::read_to_string(manifest)?)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let field = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("manifest lacks '{k}'")));
    let path = |k: &str| field(k).map(|p| base.join(p));
    let number = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::Format(format!("manifest '{k}' is not an integer")))
    };
    let ratio = number("ratio")?;
    let bands = number("bands")?;
    let class_names: Vec<String> = field("classes")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if class_names.len() < 2 {
        bail!(Config, "manifest must name at least two classes");
    }
    let fused = match kv.get("fused") {
        Some(p) => Some(read_tensor(&base.join(p))?),
        None => None,
    };
    let scene = RasterPair::new(
        read_tensor(&path("pan")?)?,
        read_tensor(&path("ms")?)?,
        fused,
        ratio,
        read_labels(&path("labels")?)?,
        read_labels(&path("objects")?)?,
    )?;
    if scene.bands() != bands {
        bail!(Dimension, "manifest declares {bands} bands, MS raster has {}", scene.bands());
    }
    if let Some(&max) = scene.labels.data.iter().max() {
        if max as usize > class_names.len() {
            bail!(Label, "label {max} exceeds the {} declared classes", class_names.len());
        }
    }
    Ok(Dataset { scene, class_names })
}
