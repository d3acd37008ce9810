//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//! `GCM1`, seven u32 config fields, one u8 LOD-embedding flag, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims,
//! f64 values.

use std::io::{Read, Write};

use ndarray::IxDyn;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCM1";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        c.street_image_size,
        c.aerial_image_size,
        c.patch_size,
        c.token_dim,
        c.heads,
        c.embed_dim,
        c.n_lods,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&[c.lod_embedding as u8])?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint. Tensor names, order and shapes must match the
/// config stored in the header.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = read_u32(&mut r)? as usize;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let config = ModelConfig {
        street_image_size: f[0],
        aerial_image_size: f[1],
        patch_size: f[2],
        token_dim: f[3],
        heads: f[4],
        embed_dim: f[5],
        n_lods: f[6],
        lod_embedding: match flag[0] {
            0 => false,
            1 => true,
            x => return Err(Error::Format(format!("bad LOD-embedding flag {x}"))),
        },
    };
    let mut params = ModelParams::zeros(config)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, config implies {}",
            slots.len()
        )));
    }
    for (expected, t) in slots.iter_mut() {
        let len = read_u32(&mut r)? as usize;
        if len > 256 {
            return Err(Error::Format(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        if name != expected.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor `{expected}`, found `{}`",
                String::from_utf8_lossy(&name)
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        if IxDyn(&dims) != t.raw_dim() {
            return Err(Error::Format(format!(
                "tensor `{expected}` has shape {dims:?}, expected {:?}",
                t.shape()
            )));
        }
        let mut buf = [0u8; 8];
        for v in t.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    drop(slots);
    Ok(params)
}
