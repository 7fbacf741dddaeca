//! On-disk parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"LOOPCKPT"
//! version 1 byte   0x01
//! meta    u32 length + UTF-8 JSON (step counter + model config echo)
//! count   u32 number of arrays
//! per array, in the model's fixed registration order:
//!   name  u16 length + UTF-8 bytes
//!   ndim  u8, then u32 per extent
//!   data  8 bytes per value, f64 little-endian
//! ```
//!
//! The writer is deterministic, so save -> load -> save is byte-identical.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"LOOPCKPT";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Self-describing header stored alongside the arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config: ModelConfig,
}

pub fn save(path: &Path, model: &Model, step: u64) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let meta = CheckpointMeta { step, config: model.config().clone() };
    let meta_json = serde_json::to_vec(&meta)?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for p in model.params().entries() {
        w.write_all(&(p.name.len() as u16).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.shape.len() as u8])?;
        for &extent in &p.shape {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(CheckpointError::BadVersion(version[0]));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("array name: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push((name, shape, data));
    }
    let model = Model::from_arrays(meta.config.clone(), arrays)?;
    Ok((model, meta))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, io::Error> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, io::Error> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
