//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u64`, all values little-endian `f32`):
//!
//! ```text
//! "MRFW1" count { name_len name rank extent* value* }*
//! adam_flag:u8 [ step count { name_len name m* v* }* ]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::nn::params::{Moments, ParamSet};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"MRFW1";

/// Raw checkpoint contents, not yet bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub values: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamSection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSection {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<f32>>,
}

pub fn write_params<T: Real, W: Write>(params: &ParamSet<T>, with_adam: bool, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u64(&mut w, params.len() as u64)?;
    for (name, p) in params.iter() {
        put_name(&mut w, name)?;
        let shape = p.value.shape();
        put_u64(&mut w, shape.len() as u64)?;
        for &e in shape {
            put_u64(&mut w, e as u64)?;
        }
        put_values(&mut w, p.value.data())?;
    }
    if with_adam {
        w.write_all(&[1])?;
        put_u64(&mut w, params.step())?;
        let trainable: Vec<_> = params.iter().filter(|(_, p)| p.trainable()).collect();
        put_u64(&mut w, trainable.len() as u64)?;
        for (name, p) in trainable {
            let m = p.moments.as_ref().expect("trainable parameters carry moments");
            put_name(&mut w, name)?;
            put_values(&mut w, m.m.data())?;
            put_values(&mut w, m.v.data())?;
        }
    } else {
        w.write_all(&[0])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save<T: Real>(params: &ParamSet<T>, with_adam: bool, path: &Path) -> Result<()> {
    write_params(params, with_adam, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        bail!(Format, "bad checkpoint magic");
    }
    let count = get_u64(&mut r)?;
    let mut values = Vec::new();
    let mut shapes = BTreeMap::new();
    for _ in 0..count {
        let name = get_name(&mut r)?;
        let rank = get_u64(&mut r)?;
        if rank == 0 || rank > 8 {
            bail!(Format, "parameter '{name}' has implausible rank {rank}");
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(to_extent(get_u64(&mut r)?)?);
        }
        let len = element_count(&shape)?;
        let data = get_values(&mut r, len)?;
        shapes.insert(name.clone(), shape.clone());
        values.push((name, Tensor::new(&shape, data)?));
    }
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag)?;
    let adam = match flag[0] {
        0 => None,
        1 => {
            let step = get_u64(&mut r)?;
            let n = get_u64(&mut r)?;
            let mut moments = BTreeMap::new();
            for _ in 0..n {
                let name = get_name(&mut r)?;
                let Some(shape) = shapes.get(&name) else {
                    bail!(Format, "optimizer state for unknown parameter '{name}'");
                };
                let len = element_count(shape)?;
                let m = Tensor::new(shape, get_values(&mut r, len)?)?;
                let v = Tensor::new(shape, get_values(&mut r, len)?)?;
                moments.insert(name, Moments { m, v });
            }
            Some(AdamSection { step, moments })
        }
        other => bail!(Format, "bad optimizer-state flag {other}"),
    };
    Ok(Checkpoint { values, adam })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

impl Checkpoint {
    /// Copies values (and optimizer state, when present) into a parameter
    /// set with exactly the same names and shapes.
    pub fn restore_into<T: Real>(&self, params: &mut ParamSet<T>) -> Result<()> {
        if self.values.len() != params.len() {
            bail!(
                Format,
                "checkpoint holds {} parameters, model expects {}",
                self.values.len(),
                params.len()
            );
        }
        for (name, t) in &self.values {
            let dst = params.get_mut(name).map_err(|_| {
                Error::Format(format!("checkpoint parameter '{name}' not in model"))
            })?;
            if dst.shape() != t.shape() {
                bail!(
                    Format,
                    "parameter '{name}' has shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    dst.shape()
                );
            }
            *dst = t.cast();
        }
        if let Some(adam) = &self.adam {
            for (name, mom) in &adam.moments {
                let Some(dst) = params.moments_mut(name) else {
                    bail!(Format, "optimizer state for non-trainable '{name}'");
                };
                dst.m = mom.m.cast();
                dst.v = mom.v.cast();
            }
            params.set_step(adam.step);
        }
        Ok(())
    }
}

fn to_extent(v: u64) -> Result<usize> {
    match usize::try_from(v) {
        Ok(e) if e > 0 => Ok(e),
        _ => bail!(Format, "invalid extent {v}"),
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        n = n
            .checked_mul(e)
            .ok_or_else(|| Error::Format(format!("extent overflow in {shape:?}")))?;
    }
    // Four bytes per value must also be addressable.
    if n.checked_mul(4).is_none() {
        bail!(Format, "extent overflow in {shape:?}");
    }
    Ok(n)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    put_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn get_name<R: Read>(r: &mut R) -> Result<String> {
    let len = get_u64(r)?;
    if len > 4096 {
        bail!(Format, "implausible parameter name length {len}");
    }
    let mut b = vec![0u8; len as usize];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
}

fn put_values<T: Real, W: Write>(w: &mut W, values: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_values<R: Read>(r: &mut R, len: usize) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    let mut chunk = vec![0u8; 4 * len.min(1 << 16)];
    let mut remaining = len;
    while remaining > 0 {
        let take = remaining.min(1 << 16);
        read_exact(r, &mut chunk[..4 * take])?;
        out.extend(
            chunk[..4 * take]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= take;
    }
    Ok(out)
}
