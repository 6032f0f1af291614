//! Checkpoint file: magic `b"CHNP"`, `u32` version, `u32` tensor count, then
//! per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims and a
//! little-endian `f32` payload.
//!
//! Two metadata tensors travel with the weights: `meta.arch` holds
//! `(channels, stem_channels, heads, cross_layers)` and `meta.gamma` the
//! padding ratio the model was trained with.

use super::{NetConfig, NetParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gridio::{expect_magic, read_f32s, read_u32, write_f32s, write_u32};
use crate::scalar::Real;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CHNP";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    write_f32s(w, data)
}

pub fn write_checkpoint<W: Write, T: Real>(w: &mut W, params: &NetParams<T>, gamma: f64) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u32(w, (params.names().len() + 2) as u32)?;
    let c = params.config;
    let arch = [c.channels, c.stem_channels, c.heads, c.cross_layers].map(|v| v as f32);
    write_tensor(w, "meta.arch", &[4], &arch)?;
    write_tensor(w, "meta.gamma", &[1], &[gamma as f32])?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let data: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        write_tensor(w, name, t.shape(), &data)?;
    }
    Ok(())
}

/// Reads a checkpoint into `f32` parameters and the stored padding ratio.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(NetParams<f32>, f64)> {
    expect_magic(r, &CHECKPOINT_MAGIC)?;
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)? as usize;
    let (mut arch, mut gamma) = (None, None);
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > MAX_NAME {
            return Err(Error::Format(format!("tensor name of {len} bytes")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = read_f32s(r, shape.iter().product())?;
        match name.as_str() {
            "meta.arch" if data.len() == 4 => arch = Some(data),
            "meta.gamma" if data.len() == 1 => gamma = Some(f64::from(data[0])),
            _ => named.push((name, Tensor::new(shape, data)?)),
        }
    }
    let arch = arch.ok_or_else(|| Error::Format("missing meta.arch".into()))?;
    let gamma = gamma.ok_or_else(|| Error::Format("missing meta.gamma".into()))?;
    let config = NetConfig {
        channels: arch[0] as usize,
        stem_channels: arch[1] as usize,
        heads: arch[2] as usize,
        cross_layers: arch[3] as usize,
    };
    Ok((NetParams::from_named(config, named)?, gamma))
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &NetParams<T>, gamma: f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params, gamma)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetParams<f32>, f64)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
