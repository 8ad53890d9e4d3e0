//! Minimal raster container.
//!
//! ```text
//! "MRRAST1\n"  "h w c dtype\n"  payload
//! ```
//!
//! `dtype` is `f32` or `i32`; the payload is row-major, band-interleaved,
//! little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MRRAST1\n";

/// Single-band integer raster (labels, object ids). Zero means "none".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    F32(Tensor<f32>),
    I32 {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<i32>,
    },
}

pub fn write_raster<W: Write>(raster: &Raster, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    match raster {
        Raster::F32(t) => {
            let (h, wd, c) = hwc(t.shape())?;
            writeln!(w, "{h} {wd} {c} f32")?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Raster::I32 {
            height,
            width,
            channels,
            data,
        } => {
            if height * width * channels != data.len() || data.is_empty() {
                bail!(Dimension, "integer raster payload does not match its extents");
            }
            writeln!(w, "{height} {width} {channels} i32")?;
            let mut buf = Vec::with_capacity(data.len() * 4);
            data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster<R: Read>(r: R) -> Result<Raster> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        bail!(Format, "bad raster magic");
    }
    let mut header = String::new();
    r.by_ref().take(128).read_line(&mut header)?;
    if !header.ends_with('\n') {
        bail!(Format, "unterminated raster header");
    }
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [h, w, c, dtype] = fields[..] else {
        bail!(Format, "raster header must read 'h w c dtype'");
    };
    let dim = |s: &str| match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Format(format!("bad raster extent '{s}'"))),
    };
    let (h, w, c) = (dim(h)?, dim(w)?, dim(c)?);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("raster extents {h}×{w}×{c} overflow")))?;
    // Read incrementally so a bogus header cannot force a huge allocation.
    let mut payload = Vec::new();
    let got = r.by_ref().take(4 * n as u64).read_to_end(&mut payload)?;
    if got != 4 * n {
        bail!(Format, "truncated raster payload: {got} of {} bytes", 4 * n);
    }
    let words = payload.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
    match dtype {
        "f32" => Ok(Raster::F32(Tensor::new(
            &[h, w, c],
            words.map(f32::from_le_bytes).collect(),
        )?)),
        "i32" => Ok(Raster::I32 {
            height: h,
            width: w,
            channels: c,
            data: words.map(i32::from_le_bytes).collect(),
        }),
        other => bail!(Format, "unknown raster dtype '{other}'"),
    }
}

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated raster".into()),
        _ => Error::Io(e),
    }
}

fn hwc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => bail!(Dimension, "rasters are H×W or H×W×C, got {shape:?}"),
    }
}

pub fn save_raster(path: &Path, raster: &Raster) -> Result<()> {
    write_raster(raster, BufWriter::new(File::create(path)?))
}

pub fn load_raster(path: &Path) -> Result<Raster> {
    read_raster(File::open(path)?)
}

/// Writes a real-valued `H×W×C` (or `H×W`) tensor.
pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    save_raster(path, &Raster::F32(t.clone()))
}

/// Reads a real-valued raster as an `H×W×C` tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    match load_raster(path)? {
        Raster::F32(t) => Ok(t),
        Raster::I32 { .. } => bail!(Format, "{}: expected an f32 raster", path.display()),
    }
}

pub fn write_labels(path: &Path, g: &LabelGrid) -> Result<()> {
    let data = g
        .data
        .iter()
        .map(|&v| i32::try_from(v).map_err(|_| Error::Format(format!("label {v} exceeds i32"))))
        .collect::<Result<_>>()?;
    save_raster(
        path,
        &Raster::I32 {
            height: g.height,
            width: g.width,
            channels: 1,
            data,
        },
    )
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    match load_raster(path)? {
        Raster::I32 {
            height,
            width,
            channels: 1,
            data,
        } => {
            let data = data
                .into_iter()
                .map(|v| u32::try_from(v).map_err(|_| Error::Format(format!("negative label {v}"))))
                .collect::<Result<_>>()?;
            Ok(LabelGrid { height, width, data })
        }
        _ => bail!(Format, "{}: expected a single-band i32 raster", path.display()),
    }
}
